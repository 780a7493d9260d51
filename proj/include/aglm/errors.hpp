// Error type shared across the library. Every failure carries a kind that
// maps onto the CLI exit codes (usage=1, input=2, integrity=3, numeric=4).
#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace aglm {

class Error : public std::runtime_error {
public:
    enum class Kind {
        usage,      // bad invocation
        input,      // missing or invalid input (files, configs, ranges)
        integrity,  // corrupt or mismatched artifact
        numeric,    // NaN/Inf or other numeric failure
        contract,   // API misuse (shape mismatch, backward on non-scalar, ...)
    };

    Error(Kind kind, std::string message)
        : std::runtime_error(std::move(message)), kind_(kind) {}

    Kind kind() const { return kind_; }

    int exit_code() const {
        switch (kind_) {
            case Kind::usage: return 1;
            case Kind::input: return 2;
            case Kind::integrity: return 3;
            case Kind::numeric: return 4;
            case Kind::contract: return 2;
        }
        return 2;
    }

private:
    Kind kind_;
};

namespace detail {

template <class... Parts>
std::string cat(Parts&&... parts) {
    std::ostringstream os;
    (os << ... << parts);
    return os.str();
}

}  // namespace detail

template <class... Parts>
[[noreturn]] void fail(Error::Kind kind, Parts&&... parts) {
    throw Error(kind, detail::cat(std::forward<Parts>(parts)...));
}

}  // namespace aglm
