#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dger/autodiff.hpp"
#include "dger/common.hpp"
#include "dger/nn.hpp"

namespace dger {

// ===========================================================================
// Character tokenizer, n-best lists, word error rate, and the frame-to-
// character alignment used to feed acoustic embeddings to the corrector.
// ===========================================================================

class Tokenizer {
public:
    static constexpr int kBos = 0;
    static constexpr int kEos = 1;
    static constexpr int kPad = 2;
    static constexpr int kUnk = 3;
    static constexpr int kNumSpecials = 4;

    explicit Tokenizer(std::string charset = "abcdefghijklmnopqrstuvwxyz ")
        : charset_(std::move(charset)) {
        for (std::size_t i = 0; i < charset_.size(); ++i) {
            const char c = charset_[i];
            if (char_to_id_.count(c)) fail(strfmt("tokenizer: duplicate character '%c'", c));
            char_to_id_[c] = kNumSpecials + static_cast<int>(i);
        }
    }

    int vocab_size() const { return kNumSpecials + static_cast<int>(charset_.size()); }

    bool in_vocab(char c) const { return char_to_id_.count(c) > 0; }

    std::vector<int> encode(const std::string& text) const {
        std::vector<int> ids;
        ids.reserve(text.size());
        for (char c : text) {
            auto it = char_to_id_.find(c);
            ids.push_back(it == char_to_id_.end() ? kUnk : it->second);
        }
        return ids;
    }

    // BOS ... EOS framing used for hypothesis token sequences.
    std::vector<int> encode_delimited(const std::string& text) const {
        std::vector<int> ids;
        ids.reserve(text.size() + 2);
        ids.push_back(kBos);
        for (int id : encode(text)) ids.push_back(id);
        ids.push_back(kEos);
        return ids;
    }

    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        out.reserve(ids.size());
        for (int id : ids) {
            if (id == kBos || id == kEos || id == kPad) continue;
            if (id == kUnk) {
                out.push_back('?');
                continue;
            }
            const int ci = id - kNumSpecials;
            if (ci < 0 || ci >= static_cast<int>(charset_.size()))
                fail(strfmt("tokenizer: id %d out of range", id));
            out.push_back(charset_[static_cast<std::size_t>(ci)]);
        }
        return out;
    }

private:
    std::string charset_;
    std::map<char, int> char_to_id_;
};

// Strip the BOS/EOS framing from a delimited token sequence.
inline std::vector<int> interior_tokens(const std::vector<int>& tokens) {
    if (tokens.size() < 2 || tokens.front() != Tokenizer::kBos || tokens.back() != Tokenizer::kEos)
        fail("interior_tokens: sequence must be BOS ... EOS framed");
    return std::vector<int>(tokens.begin() + 1, tokens.end() - 1);
}

struct Hypothesis {
    std::vector<int> tokens;  // BOS ... EOS
    double log_score = 0.0;
};

struct NBestList {
    std::vector<Hypothesis> hyps;  // sorted by descending log_score

    int n() const { return static_cast<int>(hyps.size()); }
    const Hypothesis& top1() const {
        if (hyps.empty()) fail("n-best list: empty");
        return hyps.front();
    }
    void validate(int beam) const {
        if (hyps.empty()) fail("n-best list: empty");
        if (n() > beam) fail(strfmt("n-best list: %d hypotheses exceed beam %d", n(), beam));
        for (int i = 1; i < n(); ++i)
            if (hyps[static_cast<std::size_t>(i - 1)].log_score <
                hyps[static_cast<std::size_t>(i)].log_score)
                fail("n-best list: not sorted by descending score");
        for (const auto& h : hyps) {
            if (h.tokens.size() < 2 || h.tokens.front() != Tokenizer::kBos ||
                h.tokens.back() != Tokenizer::kEos)
                fail("n-best list: hypothesis not BOS/EOS-delimited");
        }
    }
};

// ---------------------------------------------------------------------------
// Word error rate.
// ---------------------------------------------------------------------------

// Lowercase and collapse whitespace runs; ASR scoring convention.
inline std::string normalize_text(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    bool in_space = true;
    for (char c : s) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!in_space) out.push_back(' ');
            in_space = true;
        } else {
            out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
            in_space = false;
        }
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    return out;
}

inline std::vector<std::string> split_words(const std::string& s) {
    std::vector<std::string> words;
    std::string cur;
    for (char c : normalize_text(s) + " ") {
        if (c == ' ') {
            if (!cur.empty()) words.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    return words;
}

struct EditAlignment {
    int substitutions = 0;
    int insertions = 0;
    int deletions = 0;
    int hits = 0;
    // (ref index, hyp index); -1 marks the gap side of an insertion/deletion.
    std::vector<std::array<int, 2>> pairs;

    int edits() const { return substitutions + insertions + deletions; }
};

// Minimal-edit alignment of hypothesis words to reference words (uniform
// costs). Backtrace prefers diagonal, then deletion, then insertion, which
// makes the alignment deterministic; the edit count is optimal regardless.
inline EditAlignment edit_alignment(const std::vector<std::string>& ref,
                                    const std::vector<std::string>& hyp) {
    const int r = static_cast<int>(ref.size());
    const int h = static_cast<int>(hyp.size());
    std::vector<int> cost(static_cast<std::size_t>(r + 1) * (h + 1));
    auto at = [&](int i, int j) -> int& { return cost[static_cast<std::size_t>(i) * (h + 1) + j]; };
    for (int i = 0; i <= r; ++i) at(i, 0) = i;
    for (int j = 0; j <= h; ++j) at(0, j) = j;
    for (int i = 1; i <= r; ++i)
        for (int j = 1; j <= h; ++j) {
            const int diag = at(i - 1, j - 1) + (ref[static_cast<std::size_t>(i - 1)] ==
                                                         hyp[static_cast<std::size_t>(j - 1)]
                                                     ? 0
                                                     : 1);
            at(i, j) = std::min({diag, at(i - 1, j) + 1, at(i, j - 1) + 1});
        }

    EditAlignment a;
    int i = r, j = h;
    while (i > 0 || j > 0) {
        if (i > 0 && j > 0 &&
            at(i, j) == at(i - 1, j - 1) + (ref[static_cast<std::size_t>(i - 1)] ==
                                                    hyp[static_cast<std::size_t>(j - 1)]
                                                ? 0
                                                : 1)) {
            if (ref[static_cast<std::size_t>(i - 1)] == hyp[static_cast<std::size_t>(j - 1)])
                ++a.hits;
            else
                ++a.substitutions;
            a.pairs.push_back({i - 1, j - 1});
            --i;
            --j;
        } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
            ++a.deletions;
            a.pairs.push_back({i - 1, -1});
            --i;
        } else {
            ++a.insertions;
            a.pairs.push_back({-1, j - 1});
            --j;
        }
    }
    std::reverse(a.pairs.begin(), a.pairs.end());
    return a;
}

// (S+I+D)/|reference| over normalized words; may exceed 1.
inline double wer(const std::string& reference, const std::string& hypothesis) {
    const std::vector<std::string> ref = split_words(reference);
    if (ref.empty()) fail("wer: empty reference");
    const std::vector<std::string> hyp = split_words(hypothesis);
    const EditAlignment a = edit_alignment(ref, hyp);
    return static_cast<double>(a.edits()) / static_cast<double>(ref.size());
}

// ---------------------------------------------------------------------------
// Embedding helpers.
// ---------------------------------------------------------------------------

// Character ids -> L x D_llm rows from the embedding table. An empty id
// sequence yields a 0 x D_llm matrix.
inline Var embed_text(Tape& t, Var table, const std::vector<int>& ids) {
    return t.embedding_lookup(table, ids);
}

// Contiguous frame segments for char_count characters over t_frames frames.
// When char_count <= t_frames the sizes differ by at most 1 with the
// remainder given to the earliest segments; otherwise each character maps to
// one (possibly repeated) frame, which repeat-pads short inputs.
inline std::vector<std::pair<int, int>> char_segments(int t_frames, int char_count) {
    if (t_frames < 1) fail("char_segments: need at least one frame");
    if (char_count < 1) fail("char_segments: need at least one character");
    std::vector<std::pair<int, int>> segs;
    segs.reserve(static_cast<std::size_t>(char_count));
    if (char_count <= t_frames) {
        const int base = t_frames / char_count;
        const int rem = t_frames % char_count;
        int begin = 0;
        for (int i = 0; i < char_count; ++i) {
            const int len = base + (i < rem ? 1 : 0);
            segs.emplace_back(begin, begin + len);
            begin += len;
        }
    } else {
        for (int i = 0; i < char_count; ++i) {
            const int f = static_cast<int>((static_cast<long long>(i) * t_frames) / char_count);
            segs.emplace_back(f, f + 1);
        }
    }
    return segs;
}

// Pool acoustic frames into char_count rows and project to the text width.
// x_audio: T' x D_enc; proj_w: D_enc x D_llm; proj_b: 1 x D_llm.
inline Var align_frames_to_chars(Tape& t, Var x_audio, int char_count, Var proj_w, Var proj_b) {
    const auto segs = char_segments(x_audio.val().dim(0), char_count);
    Var pooled = t.mean_pool_segments(x_audio, segs);
    return linear(t, pooled, proj_w, proj_b);
}

}  // namespace dger
