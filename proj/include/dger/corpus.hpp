#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dger/common.hpp"
#include "dger/rng.hpp"
#include "dger/tensor.hpp"
#include "dger/text.hpp"

namespace dger {

// ===========================================================================
// Deterministic synthetic speech corpus. Utterances are rendered straight to
// feature frames from per-character templates and mixed with one of two
// statistically distinct noise families at a controlled SNR. Everything is a
// pure function of (config, seed).
// ===========================================================================

enum class NoiseFamily { none, in_domain, out_of_domain };

inline const char* noise_family_name(NoiseFamily f) {
    switch (f) {
        case NoiseFamily::none: return "none";
        case NoiseFamily::in_domain: return "in_domain";
        case NoiseFamily::out_of_domain: return "out_of_domain";
    }
    return "?";
}

inline NoiseFamily noise_family_from(const std::string& s) {
    if (s == "none") return NoiseFamily::none;
    if (s == "in_domain") return NoiseFamily::in_domain;
    if (s == "out_of_domain") return NoiseFamily::out_of_domain;
    fail(strfmt("unknown noise family '%s'", s.c_str()));
}

struct Vocabulary {
    std::vector<std::string> words;
    std::string characters;  // unique characters plus space
    std::uint64_t template_seed = 0;
    int frames_per_char = 4;
    int n_features = 16;
    double jitter = 0.05;

    bool has_word(const std::string& w) const {
        for (const auto& v : words)
            if (v == w) return true;
        return false;
    }

    void validate() const {
        std::set<std::string> seen;
        for (const auto& w : words) {
            if (w.empty()) fail("vocabulary: empty word");
            if (!seen.insert(w).second) fail(strfmt("vocabulary: duplicate word '%s'", w.c_str()));
            for (char c : w)
                if (characters.find(c) == std::string::npos)
                    fail(strfmt("vocabulary: word '%s' uses unknown character '%c'", w.c_str(), c));
        }
        if (characters.find(' ') == std::string::npos) fail("vocabulary: missing space character");
    }

    // Random distinct words over a small letter pool; small pools make words
    // phonetically confusable, which keeps n-best lists interesting.
    static Vocabulary build(int n_words, int len_min, int len_max, std::uint64_t seed,
                            const std::string& letters = "aeiorst") {
        if (n_words < 1) fail("vocabulary: need at least one word");
        if (len_min < 1 || len_max < len_min) fail("vocabulary: bad word length range");
        Vocabulary v;
        v.template_seed = mix_seed(seed, 0x7e3);
        Rng rng(seed);
        std::set<std::string> seen;
        int guard = 0;
        while (static_cast<int>(v.words.size()) < n_words) {
            if (++guard > 100000) fail("vocabulary: letter pool too small for requested word count");
            std::string w;
            const int len = rng.uniform_int(len_min, len_max);
            for (int i = 0; i < len; ++i)
                w.push_back(letters[static_cast<std::size_t>(rng.uniform_int(letters.size()))]);
            if (seen.insert(w).second) v.words.push_back(w);
        }
        std::set<char> chars(letters.begin(), letters.end());
        chars.insert(' ');
        v.characters.assign(chars.begin(), chars.end());
        v.validate();
        return v;
    }
};

struct Utterance {
    std::string id;
    std::string transcript;
    Tensor clean_frames;  // T x F
    Tensor noisy_frames;  // T x F, equals clean for the clean condition
    double snr_db = 0.0;  // meaningful iff family != none
    NoiseFamily family = NoiseFamily::none;
};

struct CorpusSplit {
    std::string name;
    std::vector<Utterance> utts;
};

struct CorpusConfig {
    int vocab_words = 20;
    int word_len_min = 2;
    int word_len_max = 4;
    int train_utterances = 2000;
    int test_utterances = 200;
    int utt_words_min = 2;
    int utt_words_max = 4;
    int frames_per_char = 4;
    int n_features = 16;
    double jitter = 0.05;
    int snr_min_db = 5;
    int snr_max_db = 20;
};

struct Corpus {
    Vocabulary vocab;
    CorpusSplit train;
    CorpusSplit test_in;
    CorpusSplit test_out;
    CorpusSplit test_clean;
};

// ---------------------------------------------------------------------------
// Rendering.
// ---------------------------------------------------------------------------

// Fixed frames for one character, a pure function of (template_seed, char).
inline Tensor char_template(const Vocabulary& v, char c) {
    Rng rng(mix_seed(v.template_seed, static_cast<std::uint64_t>(static_cast<unsigned char>(c))));
    return Tensor::randn({v.frames_per_char, v.n_features}, rng);
}

// Transcript -> T x F frames: one template block per character (spaces
// included) plus small positional jitter. The jitter stream advances by
// position, not by character, so transcripts differing in one character
// differ only in that character's block.
inline Tensor render_clean(const std::string& transcript, const Vocabulary& vocab,
                           std::uint64_t seed) {
    for (const auto& w : split_words(transcript))
        if (!vocab.has_word(w)) fail(strfmt("render: word '%s' not in vocabulary", w.c_str()));
    const std::string text = normalize_text(transcript);
    const int chars = static_cast<int>(text.size());
    Tensor out({chars * vocab.frames_per_char, vocab.n_features});
    Rng jitter_rng(mix_seed(seed, 0x11));
    for (int ci = 0; ci < chars; ++ci) {
        const Tensor tmpl = char_template(vocab, text[static_cast<std::size_t>(ci)]);
        double* dst = out.data() +
                      static_cast<std::size_t>(ci) * vocab.frames_per_char * vocab.n_features;
        for (std::size_t i = 0; i < tmpl.numel(); ++i)
            dst[i] = tmpl[i] + vocab.jitter * jitter_rng.normal();
    }
    return out;
}

// ---------------------------------------------------------------------------
// Noise.
// ---------------------------------------------------------------------------

namespace detail {

// Gaussian noise shaped by a mild fixed spectral envelope. The envelope is a
// family-level constant so every in-domain sample shares the same spectrum.
inline Tensor noise_in_domain(int t, int f, Rng& rng) {
    Rng env_rng(0x0ddc0ffeeULL);
    std::vector<double> env(static_cast<std::size_t>(f));
    for (auto& e : env) e = env_rng.uniform(0.8, 1.2);
    Tensor n({t, f});
    for (int ti = 0; ti < t; ++ti)
        for (int fi = 0; fi < f; ++fi)
            n.at(ti, fi) = env[static_cast<std::size_t>(fi)] * rng.normal();
    return n;
}

// Sinusoidal-in-time ridges concentrated on a few feature bins plus sparse
// bursts; spectrally peaky, unlike the in-domain family.
inline Tensor noise_out_of_domain(int t, int f, Rng& rng) {
    Tensor n = Tensor::zeros({t, f});
    for (int r = 0; r < 3; ++r) {
        const double center = rng.uniform(0.0, static_cast<double>(f - 1));
        const double omega = rng.uniform(0.2, 1.5);
        const double phase = rng.uniform(0.0, 6.283185307179586);
        const double amp = rng.uniform(0.8, 1.6);
        const double sigma = rng.uniform(0.5, 0.9);
        for (int ti = 0; ti < t; ++ti) {
            const double s = amp * std::sin(omega * ti + phase);
            for (int fi = 0; fi < f; ++fi) {
                const double d = (fi - center) / sigma;
                n.at(ti, fi) += s * std::exp(-0.5 * d * d);
            }
        }
    }
    const int bursts = std::max(1, t * f / 64);
    for (int b = 0; b < bursts; ++b) {
        const int ti = rng.uniform_int(t);
        const int fi = rng.uniform_int(f);
        n.at(ti, fi) += (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(2.0, 4.0);
    }
    return n;
}

inline double mean_square(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v * v;
    return s / static_cast<double>(x.numel());
}

}  // namespace detail

// Noise is rescaled so that 10*log10(signal power / noise power) equals
// snr_db exactly (up to rounding), then added elementwise. No range check;
// the public entry point below enforces the corpus SNR range.
inline Tensor mix_noise_unchecked(const Tensor& clean, NoiseFamily family, double snr_db,
                                  std::uint64_t seed) {
    if (clean.rank() != 2 || clean.numel() == 0)
        fail(strfmt("mix_noise: need a nonempty T x F matrix, got %s", clean.shape_str().c_str()));
    if (family == NoiseFamily::none) fail("mix_noise: noise family 'none' cannot be mixed");
    const double p_signal = detail::mean_square(clean);
    if (p_signal <= 0.0) fail("mix_noise: clean signal has zero power");
    Rng rng(mix_seed(seed, 0x22));
    Tensor noise = family == NoiseFamily::in_domain
                       ? detail::noise_in_domain(clean.dim(0), clean.dim(1), rng)
                       : detail::noise_out_of_domain(clean.dim(0), clean.dim(1), rng);
    const double p_noise = detail::mean_square(noise);
    if (p_noise <= 0.0) fail("mix_noise: generated noise has zero power");
    const double target = p_signal * std::pow(10.0, -snr_db / 10.0);
    const double scale = std::sqrt(target / p_noise);
    Tensor out = clean;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += scale * noise[i];
    return out;
}

inline Tensor mix_noise(const Tensor& clean, NoiseFamily family, double snr_db,
                        std::uint64_t seed) {
    if (snr_db < 5.0 || snr_db > 20.0)
        fail(strfmt("mix_noise: snr %.3f dB outside the corpus range [5, 20]", snr_db));
    return mix_noise_unchecked(clean, family, snr_db, seed);
}

inline double measured_snr_db(const Tensor& clean, const Tensor& noisy) {
    if (!clean.same_shape(noisy)) fail("measured_snr_db: shape mismatch");
    Tensor residual = noisy;
    for (std::size_t i = 0; i < residual.numel(); ++i) residual[i] -= clean[i];
    const double pn = detail::mean_square(residual);
    const double ps = detail::mean_square(clean);
    if (pn <= 0.0) fail("measured_snr_db: zero noise power");
    return 10.0 * std::log10(ps / pn);
}

// Geometric over arithmetic mean of per-feature power; near 1 for spectrally
// flat noise, near 0 for peaky noise. Used to tell the families apart.
inline double spectral_flatness(const Tensor& residual) {
    if (residual.rank() != 2 || residual.numel() == 0) fail("spectral_flatness: need a T x F matrix");
    const int t = residual.dim(0), f = residual.dim(1);
    double log_sum = 0.0, lin_sum = 0.0;
    for (int fi = 0; fi < f; ++fi) {
        double p = 0.0;
        for (int ti = 0; ti < t; ++ti) p += residual.at(ti, fi) * residual.at(ti, fi);
        p = p / t + 1e-12;
        log_sum += std::log(p);
        lin_sum += p;
    }
    return std::exp(log_sum / f) / (lin_sum / f);
}

// ---------------------------------------------------------------------------
// Corpus generation.
// ---------------------------------------------------------------------------

namespace detail {

inline Utterance make_utterance(const Vocabulary& vocab, const CorpusConfig& cfg,
                                const std::string& id, NoiseFamily family, std::uint64_t seed) {
    Rng rng(seed);
    std::string transcript;
    const int n_words = rng.uniform_int(cfg.utt_words_min, cfg.utt_words_max);
    for (int w = 0; w < n_words; ++w) {
        if (w > 0) transcript += ' ';
        transcript += vocab.words[static_cast<std::size_t>(rng.uniform_int(vocab.words.size()))];
    }
    Utterance u;
    u.id = id;
    u.transcript = transcript;
    u.family = family;
    u.clean_frames = render_clean(transcript, vocab, mix_seed(seed, 0x33));
    if (family == NoiseFamily::none) {
        u.noisy_frames = u.clean_frames;
    } else {
        u.snr_db = static_cast<double>(rng.uniform_int(cfg.snr_min_db, cfg.snr_max_db));
        u.noisy_frames = mix_noise(u.clean_frames, family, u.snr_db, mix_seed(seed, 0x44));
    }
    return u;
}

inline CorpusSplit make_split(const Vocabulary& vocab, const CorpusConfig& cfg,
                              const std::string& name, NoiseFamily family, int count,
                              std::uint64_t split_seed) {
    CorpusSplit s;
    s.name = name;
    s.utts.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i)
        s.utts.push_back(make_utterance(vocab, cfg, strfmt("%s-%05d", name.c_str(), i), family,
                                        mix_seed(split_seed, static_cast<std::uint64_t>(i))));
    return s;
}

}  // namespace detail

inline Corpus generate_corpus(const CorpusConfig& cfg, std::uint64_t seed) {
    if (cfg.train_utterances < 1) fail("generate_corpus: train split must be nonempty");
    if (cfg.test_utterances < 0) fail("generate_corpus: negative test count");
    if (cfg.snr_min_db < 5 || cfg.snr_max_db > 20 || cfg.snr_min_db > cfg.snr_max_db)
        fail("generate_corpus: SNR range must lie within [5, 20]");
    Corpus c;
    c.vocab = Vocabulary::build(cfg.vocab_words, cfg.word_len_min, cfg.word_len_max,
                                mix_seed(seed, 0x55));
    c.vocab.frames_per_char = cfg.frames_per_char;
    c.vocab.n_features = cfg.n_features;
    c.vocab.jitter = cfg.jitter;
    c.train = detail::make_split(c.vocab, cfg, "train", NoiseFamily::in_domain,
                                 cfg.train_utterances, mix_seed(seed, 0x66));
    c.test_in = detail::make_split(c.vocab, cfg, "test_in", NoiseFamily::in_domain,
                                   cfg.test_utterances, mix_seed(seed, 0x77));
    c.test_out = detail::make_split(c.vocab, cfg, "test_out", NoiseFamily::out_of_domain,
                                    cfg.test_utterances, mix_seed(seed, 0x88));
    c.test_clean = detail::make_split(c.vocab, cfg, "test_clean", NoiseFamily::none,
                                      cfg.test_utterances, mix_seed(seed, 0x99));
    return c;
}

// ---------------------------------------------------------------------------
// Serialization: one JSON record per line, matrices as nested row-major
// arrays. The writer is hand-rolled so emitted bytes are deterministic.
// ---------------------------------------------------------------------------

namespace detail {

inline void json_append_number(std::string& out, double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.8g", v);
    out += buf;
}

inline void json_append_string(std::string& out, const std::string& s) {
    out += '"';
    for (char c : s) {
        if (c == '"' || c == '\\') {
            out += '\\';
            out += c;
        } else if (static_cast<unsigned char>(c) < 0x20) {
            char buf[8];
            std::snprintf(buf, sizeof(buf), "\\u%04x", c);
            out += buf;
        } else {
            out += c;
        }
    }
    out += '"';
}

inline void json_append_matrix(std::string& out, const Tensor& m) {
    out += '[';
    for (int r = 0; r < m.dim(0); ++r) {
        if (r > 0) out += ',';
        out += '[';
        for (int c = 0; c < m.dim(1); ++c) {
            if (c > 0) out += ',';
            json_append_number(out, m.at(r, c));
        }
        out += ']';
    }
    out += ']';
}

}  // namespace detail

inline std::string utterance_to_json(const Utterance& u) {
    std::string out;
    out.reserve(u.clean_frames.numel() * 24 + 256);
    out += "{\"id\":";
    detail::json_append_string(out, u.id);
    out += ",\"transcript\":";
    detail::json_append_string(out, u.transcript);
    out += ",\"noise_family\":";
    detail::json_append_string(out, noise_family_name(u.family));
    out += ",\"snr_db\":";
    if (u.family == NoiseFamily::none)
        out += "null";
    else
        detail::json_append_number(out, u.snr_db);
    out += ",\"clean\":";
    detail::json_append_matrix(out, u.clean_frames);
    out += ",\"noisy\":";
    detail::json_append_matrix(out, u.noisy_frames);
    out += '}';
    return out;
}

inline Tensor matrix_from_json(const nlohmann::json& j, const char* field) {
    if (!j.is_array()) fail(strfmt("corpus record: '%s' is not an array", field));
    const int rows = static_cast<int>(j.size());
    if (rows == 0) return Tensor({0, 0});
    const int cols = static_cast<int>(j[0].size());
    Tensor m({rows, cols});
    for (int r = 0; r < rows; ++r) {
        const auto& row = j[static_cast<std::size_t>(r)];
        if (static_cast<int>(row.size()) != cols)
            fail(strfmt("corpus record: ragged rows in '%s'", field));
        for (int c = 0; c < cols; ++c) m.at(r, c) = row[static_cast<std::size_t>(c)].get<double>();
    }
    return m;
}

inline Utterance utterance_from_json(const std::string& line) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
        fail(strfmt("corpus record: %s", e.what()));
    }
    Utterance u;
    u.id = j.at("id").get<std::string>();
    u.transcript = j.at("transcript").get<std::string>();
    u.family = noise_family_from(j.at("noise_family").get<std::string>());
    if (u.family != NoiseFamily::none) u.snr_db = j.at("snr_db").get<double>();
    u.clean_frames = matrix_from_json(j.at("clean"), "clean");
    u.noisy_frames = matrix_from_json(j.at("noisy"), "noisy");
    if (!u.clean_frames.same_shape(u.noisy_frames))
        fail(strfmt("corpus record %s: clean/noisy shape mismatch", u.id.c_str()));
    return u;
}

inline void write_split(const CorpusSplit& split, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(strfmt("cannot open '%s' for writing", path.c_str()));
    for (const auto& u : split.utts) {
        out << utterance_to_json(u) << '\n';
    }
    if (!out) fail(strfmt("write failed for '%s'", path.c_str()));
}

inline CorpusSplit read_split(const std::string& path, const std::string& name) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(strfmt("cannot open '%s'", path.c_str()));
    CorpusSplit s;
    s.name = name;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        s.utts.push_back(utterance_from_json(line));
    }
    return s;
}

inline void write_corpus(const Corpus& c, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    write_split(c.train, (fs::path(dir) / "train.jsonl").string());
    write_split(c.test_in, (fs::path(dir) / "test_in.jsonl").string());
    write_split(c.test_out, (fs::path(dir) / "test_out.jsonl").string());
    write_split(c.test_clean, (fs::path(dir) / "test_clean.jsonl").string());

    nlohmann::json meta;
    meta["vocab"]["words"] = c.vocab.words;
    meta["vocab"]["characters"] = c.vocab.characters;
    meta["vocab"]["template_seed"] = c.vocab.template_seed;
    meta["vocab"]["frames_per_char"] = c.vocab.frames_per_char;
    meta["vocab"]["n_features"] = c.vocab.n_features;
    meta["vocab"]["jitter"] = c.vocab.jitter;
    std::ofstream out((fs::path(dir) / "meta.json").string(), std::ios::binary);
    if (!out) fail(strfmt("cannot open '%s/meta.json' for writing", dir.c_str()));
    out << meta.dump(2) << '\n';
}

inline Corpus read_corpus(const std::string& dir) {
    namespace fs = std::filesystem;
    Corpus c;
    c.train = read_split((fs::path(dir) / "train.jsonl").string(), "train");
    c.test_in = read_split((fs::path(dir) / "test_in.jsonl").string(), "test_in");
    c.test_out = read_split((fs::path(dir) / "test_out.jsonl").string(), "test_out");
    c.test_clean = read_split((fs::path(dir) / "test_clean.jsonl").string(), "test_clean");
    const std::string meta_path = (fs::path(dir) / "meta.json").string();
    if (fs::exists(meta_path)) {
        std::ifstream in(meta_path, std::ios::binary);
        nlohmann::json meta;
        try {
            in >> meta;
            const auto& v = meta.at("vocab");
            c.vocab.words = v.at("words").get<std::vector<std::string>>();
            c.vocab.characters = v.at("characters").get<std::string>();
            c.vocab.template_seed = v.at("template_seed").get<std::uint64_t>();
            c.vocab.frames_per_char = v.at("frames_per_char").get<int>();
            c.vocab.n_features = v.at("n_features").get<int>();
            c.vocab.jitter = v.at("jitter").get<double>();
        } catch (const std::exception& e) {
            fail(strfmt("corpus meta: %s", e.what()));
        }
    }
    return c;
}

}  // namespace dger
