// Byte-level BPE. Ids 0..255 are raw bytes, 256 is the END_OF_TEXT marker,
// merged pairs start at 257. Newline bytes never participate in merges, so a
// trained merge can always be applied inside a line without looking across
// document structure; encoding therefore processes newline-free segments and
// passes the newlines through as byte tokens.
#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "aglm/errors.hpp"
#include "aglm/utf8.hpp"

namespace aglm {

class Tokenizer {
public:
    static constexpr std::int32_t kEndOfText = 256;
    static constexpr std::size_t kBaseVocab = 257;  // 256 bytes + END_OF_TEXT

    struct Merge {
        std::int32_t left;
        std::int32_t right;
        std::int32_t id;
    };

    Tokenizer() { rebuild(); }

    // Learns merges until the vocabulary reaches vocab_size or no adjacent
    // pair occurs at least twice. Ties on count break toward the smallest
    // (left, right) pair, so training is order-independent and reproducible.
    static Tokenizer train(std::string_view text, std::size_t vocab_size) {
        if (vocab_size < kBaseVocab) {
            fail(Error::Kind::input, "tokenizer vocab_size ", vocab_size, " must be at least ",
                 kBaseVocab);
        }
        std::vector<std::vector<std::int32_t>> segments;
        std::size_t pos = 0;
        while (pos < text.size()) {
            std::size_t eol = text.find('\n', pos);
            std::size_t end = eol == std::string_view::npos ? text.size() : eol;
            if (end > pos) {
                std::vector<std::int32_t> seg;
                seg.reserve(end - pos);
                for (std::size_t i = pos; i < end; ++i) {
                    seg.push_back(static_cast<unsigned char>(text[i]));
                }
                segments.push_back(std::move(seg));
            }
            if (eol == std::string_view::npos) break;
            pos = end + 1;
        }

        Tokenizer tok;
        while (tok.vocab_size() < vocab_size) {
            std::map<std::pair<std::int32_t, std::int32_t>, std::size_t> counts;
            for (const auto& seg : segments) {
                for (std::size_t i = 0; i + 1 < seg.size(); ++i) {
                    ++counts[{seg[i], seg[i + 1]}];
                }
            }
            std::pair<std::int32_t, std::int32_t> best{};
            std::size_t best_count = 0;
            for (const auto& [pair, count] : counts) {
                if (count > best_count) {  // map order already favors the smallest pair
                    best = pair;
                    best_count = count;
                }
            }
            if (best_count < 2) break;
            std::int32_t id = static_cast<std::int32_t>(tok.vocab_size());
            tok.merges_.push_back({best.first, best.second, id});
            for (auto& seg : segments) {
                merge_pair(seg, best, id);
            }
        }
        tok.rebuild();
        return tok;
    }

    std::size_t vocab_size() const { return kBaseVocab + merges_.size(); }
    std::size_t merge_count() const { return merges_.size(); }
    const std::vector<Merge>& merges() const { return merges_; }

    // Never emits special ids; END_OF_TEXT is appended by callers that need a
    // document boundary.
    std::vector<std::int32_t> encode(std::string_view text) const {
        std::vector<std::int32_t> out;
        out.reserve(text.size() / 2 + 1);
        std::size_t pos = 0;
        while (pos < text.size()) {
            std::size_t eol = text.find('\n', pos);
            std::size_t end = eol == std::string_view::npos ? text.size() : eol;
            if (end > pos) encode_segment(text.substr(pos, end - pos), out);
            if (eol == std::string_view::npos) break;
            out.push_back('\n');
            pos = end + 1;
        }
        return out;
    }

    // Expands every id to its bytes (specials expand to nothing) and replaces
    // any invalid UTF-8 with U+FFFD so the result is always printable.
    std::string decode(const std::vector<std::int32_t>& ids) const {
        std::string bytes;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            std::int32_t id = ids[i];
            if (id < 0 || static_cast<std::size_t>(id) >= vocab_size()) {
                fail(Error::Kind::input, "token id ", id, " at position ", i,
                     " is out of range [0, ", vocab_size(), ")");
            }
            bytes += expansions_[static_cast<std::size_t>(id)];
        }
        return utf8::sanitize(bytes);
    }

    const std::string& token_bytes(std::int32_t id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab_size()) {
            fail(Error::Kind::input, "token id ", id, " is out of range [0, ", vocab_size(), ")");
        }
        return expansions_[static_cast<std::size_t>(id)];
    }

    std::string serialize() const {
        std::string out = "bpe-v1 " + std::to_string(vocab_size()) + "\n";
        out += "special END_OF_TEXT 256\n";
        for (const Merge& m : merges_) {
            out += std::to_string(m.left) + " " + std::to_string(m.right) + " " +
                   std::to_string(m.id) + "\n";
        }
        return out;
    }

    // Strict inverse of serialize(); any deviation is an integrity error
    // naming the first bad line.
    static Tokenizer parse(std::string_view data) {
        std::vector<std::string_view> lines;
        std::size_t pos = 0;
        while (pos < data.size()) {
            std::size_t eol = data.find('\n', pos);
            if (eol == std::string_view::npos) {
                fail(Error::Kind::integrity, "tokenizer file: missing trailing newline");
            }
            lines.push_back(data.substr(pos, eol - pos));
            pos = eol + 1;
        }
        if (lines.size() < 2) {
            fail(Error::Kind::integrity, "tokenizer file: truncated header");
        }
        std::size_t declared = 0;
        {
            std::vector<std::string_view> f = fields(lines[0]);
            if (f.size() != 2 || f[0] != "bpe-v1" || !parse_size(f[1], declared)) {
                fail(Error::Kind::integrity, "tokenizer file line 1: expected \"bpe-v1 <n>\"");
            }
        }
        if (lines[1] != "special END_OF_TEXT 256") {
            fail(Error::Kind::integrity,
                 "tokenizer file line 2: expected \"special END_OF_TEXT 256\"");
        }
        Tokenizer tok;
        for (std::size_t i = 2; i < lines.size(); ++i) {
            std::vector<std::string_view> f = fields(lines[i]);
            std::size_t left = 0, right = 0, id = 0;
            if (f.size() != 3 || !parse_size(f[0], left) || !parse_size(f[1], right) ||
                !parse_size(f[2], id)) {
                fail(Error::Kind::integrity, "tokenizer file line ", i + 1,
                     ": expected \"<left> <right> <new>\"");
            }
            std::size_t expected = kBaseVocab + (i - 2);
            if (id != expected) {
                fail(Error::Kind::integrity, "tokenizer file line ", i + 1, ": merge id ", id,
                     " out of sequence, expected ", expected);
            }
            if (left >= id || right >= id || left == kEndOfText || right == kEndOfText) {
                fail(Error::Kind::integrity, "tokenizer file line ", i + 1, ": pair (", left,
                     ", ", right, ") is not valid for merge ", id);
            }
            tok.merges_.push_back({static_cast<std::int32_t>(left),
                                   static_cast<std::int32_t>(right),
                                   static_cast<std::int32_t>(id)});
        }
        if (tok.vocab_size() != declared) {
            fail(Error::Kind::integrity, "tokenizer file: header declares vocab ", declared,
                 " but contents define ", tok.vocab_size());
        }
        tok.rebuild();
        return tok;
    }

private:
    static std::vector<std::string_view> fields(std::string_view line) {
        std::vector<std::string_view> out;
        std::size_t i = 0;
        while (i < line.size()) {
            if (line[i] == ' ') {
                ++i;
                continue;
            }
            std::size_t j = i;
            while (j < line.size() && line[j] != ' ') ++j;
            out.push_back(line.substr(i, j - i));
            i = j;
        }
        return out;
    }

    static bool parse_size(std::string_view s, std::size_t& out) {
        if (s.empty() || s.size() > 10) return false;
        std::size_t v = 0;
        for (char c : s) {
            if (c < '0' || c > '9') return false;
            v = v * 10 + static_cast<std::size_t>(c - '0');
        }
        out = v;
        return true;
    }

    static void merge_pair(std::vector<std::int32_t>& seg,
                           std::pair<std::int32_t, std::int32_t> pair, std::int32_t id) {
        std::size_t w = 0;
        for (std::size_t r = 0; r < seg.size(); ++r) {
            if (r + 1 < seg.size() && seg[r] == pair.first && seg[r + 1] == pair.second) {
                seg[w++] = id;
                ++r;
            } else {
                seg[w++] = seg[r];
            }
        }
        seg.resize(w);
    }

    // Repeatedly applies the earliest-trained merge present anywhere in the
    // segment. Earlier merges must win over later ones for encoding to agree
    // with training.
    void encode_segment(std::string_view segment, std::vector<std::int32_t>& out) const {
        std::vector<std::int32_t> toks;
        toks.reserve(segment.size());
        for (char c : segment) toks.push_back(static_cast<unsigned char>(c));
        while (toks.size() >= 2) {
            std::int32_t best_id = std::numeric_limits<std::int32_t>::max();
            std::pair<std::int32_t, std::int32_t> best_pair{};
            for (std::size_t i = 0; i + 1 < toks.size(); ++i) {
                auto it = merge_lookup_.find({toks[i], toks[i + 1]});
                if (it != merge_lookup_.end() && it->second < best_id) {
                    best_id = it->second;
                    best_pair = it->first;
                }
            }
            if (best_id == std::numeric_limits<std::int32_t>::max()) break;
            merge_pair(toks, best_pair, best_id);
        }
        out.insert(out.end(), toks.begin(), toks.end());
    }

    void rebuild() {
        merge_lookup_.clear();
        expansions_.clear();
        expansions_.reserve(vocab_size());
        for (int b = 0; b < 256; ++b) {
            expansions_.push_back(std::string(1, static_cast<char>(b)));
        }
        expansions_.push_back("");  // END_OF_TEXT carries no bytes
        for (const Merge& m : merges_) {
            merge_lookup_[{m.left, m.right}] = m.id;
            expansions_.push_back(expansions_[static_cast<std::size_t>(m.left)] +
                                  expansions_[static_cast<std::size_t>(m.right)]);
        }
    }

    std::vector<Merge> merges_;
    std::map<std::pair<std::int32_t, std::int32_t>, std::int32_t> merge_lookup_;
    std::vector<std::string> expansions_;
};

}  // namespace aglm
