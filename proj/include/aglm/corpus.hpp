// Corpus preparation: line-level cleaning, paragraph reflow, and a seeded
// paragraph-shuffle split. Cleaning is idempotent because strip rules are
// applied both to raw lines and to merged paragraphs.
#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "aglm/errors.hpp"
#include "aglm/rng.hpp"
#include "aglm/utf8.hpp"

namespace aglm {

struct CleanRules {
    bool strip_page_numbers = true;
    std::vector<std::string> strip_literals;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

// A page-number line is all digits, or "page" (any case) plus optional
// whitespace plus digits, nothing else.
inline bool is_page_number(std::string_view line) {
    std::string_view t = trim(line);
    if (t.empty()) return false;
    std::size_t i = 0;
    if (t.size() >= 4) {
        bool word = true;
        const char* page = "page";
        for (std::size_t j = 0; j < 4; ++j) {
            if (std::tolower(static_cast<unsigned char>(t[j])) != page[j]) {
                word = false;
                break;
            }
        }
        if (word) {
            i = 4;
            while (i < t.size() && std::isspace(static_cast<unsigned char>(t[i]))) ++i;
            if (i == t.size()) return false;  // bare "page" is prose
        }
    }
    std::size_t digits = 0;
    while (i < t.size() && std::isdigit(static_cast<unsigned char>(t[i]))) {
        ++i;
        ++digits;
    }
    return digits > 0 && i == t.size();
}

inline bool is_stripped(std::string_view line, const CleanRules& rules) {
    std::string_view t = trim(line);
    if (rules.strip_page_numbers && is_page_number(t)) return true;
    for (const std::string& lit : rules.strip_literals) {
        if (t == trim(lit)) return true;
    }
    return false;
}

inline bool ends_with_word_hyphen(std::string_view s) {
    if (s.size() < 2 || s.back() != '-') return false;
    unsigned char prev = static_cast<unsigned char>(s[s.size() - 2]);
    return std::isalnum(prev) != 0;
}

}  // namespace detail

// Cleans one document into a list of paragraphs. Lines matching the strip
// rules are removed, hyphenated line breaks are rejoined without the hyphen,
// remaining line breaks inside a paragraph become single spaces, and blank
// line runs delimit paragraphs. Invalid UTF-8 is an input error naming the
// document and byte offset.
inline std::vector<std::string> clean_document(std::string_view name, std::string_view text,
                                               const CleanRules& rules) {
    if (auto bad = utf8::find_invalid(text)) {
        fail(Error::Kind::input, "document \"", std::string(name),
             "\" is not valid UTF-8 at byte offset ", *bad);
    }
    std::vector<std::string> paragraphs;
    std::string current;

    auto flush = [&]() {
        if (current.empty()) return;
        // A merge can reassemble a line the line pass would have stripped
        // (for example a header split across lines), so re-check here.
        if (!detail::is_stripped(current, rules)) {
            paragraphs.push_back(current);
        }
        current.clear();
    };

    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t eol = text.find('\n', pos);
        std::string_view line =
            eol == std::string_view::npos ? text.substr(pos) : text.substr(pos, eol - pos);
        std::string_view t = detail::trim(line);
        if (t.empty()) {
            flush();
        } else if (!detail::is_stripped(t, rules)) {
            if (current.empty()) {
                current.assign(t);
            } else if (detail::ends_with_word_hyphen(current)) {
                current.pop_back();
                current.append(t);
            } else {
                current.push_back(' ');
                current.append(t);
            }
        }
        if (eol == std::string_view::npos) break;
        pos = eol + 1;
    }
    flush();
    return paragraphs;
}

struct CorpusDocument {
    std::string name;
    std::vector<std::string> paragraphs;
};

struct SplitSpec {
    double train_fraction = 0.8;
    double val_fraction = 0.1;
    double test_fraction = 0.1;
    std::uint64_t seed = 42;

    void validate() const {
        for (double f : {train_fraction, val_fraction, test_fraction}) {
            if (!(f >= 0.0 && f <= 1.0)) {
                fail(Error::Kind::input, "split fraction ", f, " must be in [0, 1]");
            }
        }
        double sum = train_fraction + val_fraction + test_fraction;
        if (std::abs(sum - 1.0) > 1e-9) {
            fail(Error::Kind::input, "split fractions sum to ", sum, ", expected 1");
        }
    }
};

struct SplitResult {
    std::string train_text;
    std::string val_text;
    std::string test_text;
    std::string manifest_json;
};

// Shuffles paragraphs across all documents with a seeded Fisher-Yates pass,
// then fills train and val greedily by byte count; the remainder is test.
// Each split file holds its paragraphs in shuffled order joined by blank
// lines. The manifest records every paragraph's assignment in original order.
inline SplitResult split_corpus(const std::vector<CorpusDocument>& docs, const SplitSpec& spec) {
    spec.validate();
    struct Block {
        std::size_t doc;
        std::size_t para;
        std::size_t bytes;
    };
    std::vector<Block> blocks;
    for (std::size_t d = 0; d < docs.size(); ++d) {
        for (std::size_t p = 0; p < docs[d].paragraphs.size(); ++p) {
            blocks.push_back({d, p, docs[d].paragraphs[p].size()});
        }
    }
    if (blocks.empty()) {
        fail(Error::Kind::input, "corpus has no paragraphs after cleaning");
    }

    std::size_t total_bytes = 0;
    for (const Block& b : blocks) total_bytes += b.bytes;

    std::vector<std::size_t> order(blocks.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(spec.seed);
    rng.shuffle(order);

    double train_target = spec.train_fraction * static_cast<double>(total_bytes);
    double val_target = spec.val_fraction * static_cast<double>(total_bytes);

    // 0 = train, 1 = val, 2 = test
    std::vector<int> assignment(blocks.size(), 2);
    std::vector<std::vector<std::size_t>> members(3);
    double train_bytes = 0.0;
    double val_bytes = 0.0;
    for (std::size_t idx : order) {
        int split;
        if (train_bytes < train_target) {
            split = 0;
            train_bytes += static_cast<double>(blocks[idx].bytes);
        } else if (val_bytes < val_target) {
            split = 1;
            val_bytes += static_cast<double>(blocks[idx].bytes);
        } else {
            split = 2;
        }
        assignment[idx] = split;
        members[split].push_back(idx);
    }

    auto join = [&](const std::vector<std::size_t>& ids) {
        std::string out;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (i) out += "\n\n";
            const Block& b = blocks[ids[i]];
            out += docs[b.doc].paragraphs[b.para];
        }
        if (!out.empty()) out += "\n";
        return out;
    };

    static const char* kSplitNames[] = {"train", "val", "test"};
    nlohmann::json manifest;
    manifest["seed"] = spec.seed;
    manifest["fractions"] = {{"train", spec.train_fraction},
                             {"val", spec.val_fraction},
                             {"test", spec.test_fraction}};
    manifest["total_bytes"] = total_bytes;
    nlohmann::json jblocks = nlohmann::json::array();
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        jblocks.push_back({{"index", i},
                           {"doc", docs[blocks[i].doc].name},
                           {"size_bytes", blocks[i].bytes},
                           {"split", kSplitNames[assignment[i]]}});
    }
    manifest["blocks"] = std::move(jblocks);

    SplitResult result;
    result.train_text = join(members[0]);
    result.val_text = join(members[1]);
    result.test_text = join(members[2]);
    result.manifest_json = manifest.dump(2) + "\n";
    return result;
}

}  // namespace aglm
