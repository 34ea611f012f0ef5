#include "vaenar/corpus.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "vaenar/serialize.hpp"
#include "vaenar/vocab.hpp"

namespace vaenar {

void SyntheticCorpusSpec::validate() const {
    if (vocab_size < 1 || vocab_size > vocab_table_size())
        throw ConfigError("corpus spec: vocab_size must be in [1, " +
                          std::to_string(vocab_table_size()) + "]");
    if (n_utterances < 1) throw ConfigError("corpus spec: n_utterances must be >= 1");
    if (min_chars < 1 || max_chars < min_chars)
        throw ConfigError("corpus spec: need 1 <= min_chars <= max_chars");
    if (n_bins < 1) throw ConfigError("corpus spec: n_bins must be >= 1");
    if (base_duration_min < 2 || base_duration_max < base_duration_min)
        throw ConfigError("corpus spec: base durations must satisfy 2 <= min <= max");
    if (duration_jitter < 0.0 || noise_std < 0.0)
        throw ConfigError("corpus spec: jitter and noise must be >= 0");
}

namespace {

double normalized_l2(const std::vector<double>& a, const std::vector<double>& b) {
    auto unit = [](const std::vector<double>& v) {
        double n = 0.0;
        for (double x : v) n += x * x;
        n = std::sqrt(n);
        std::vector<double> u(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) u[i] = v[i] / n;
        return u;
    };
    auto ua = unit(a), ub = unit(b);
    double d = 0.0;
    for (std::size_t i = 0; i < ua.size(); ++i) {
        double t = ua[i] - ub[i];
        d += t * t;
    }
    return std::sqrt(d);
}

}  // namespace

std::vector<SymbolTemplate> make_symbol_templates(const SyntheticCorpusSpec& spec) {
    Rng rng(mix_seed(spec.seed, 0x70726f66));
    std::vector<SymbolTemplate> out(spec.vocab_size);
    int bins = spec.n_bins;
    for (int s = 0; s < spec.vocab_size; ++s) {
        SymbolTemplate& t = out[s];
        t.base_duration = rng.uniform_int(spec.base_duration_min, spec.base_duration_max);
        // Gaussian bump at a symbol-specific center plus a weaker harmonic;
        // spaced centers keep profiles pairwise distinct.
        double center = (s + 0.5) * bins / static_cast<double>(spec.vocab_size);
        center += rng.uniform(-0.2, 0.2) * bins / spec.vocab_size;
        double width = 0.06 * bins + rng.uniform(0.0, 0.03 * bins);
        double center2 = std::fmod(center + bins * 0.5, static_cast<double>(bins));
        t.profile.resize(bins);
        for (int b = 0; b < bins; ++b) {
            double d1 = (b - center) / width;
            double d2 = (b - center2) / (width * 1.5);
            t.profile[b] = 0.1 + 0.8 * std::exp(-0.5 * d1 * d1) + 0.3 * std::exp(-0.5 * d2 * d2);
        }
    }
    for (int i = 0; i < spec.vocab_size; ++i)
        for (int j = i + 1; j < spec.vocab_size; ++j)
            if (normalized_l2(out[i].profile, out[j].profile) <= 0.1)
                throw NumericError("symbol templates: profiles " + std::to_string(i) + " and " +
                                   std::to_string(j) + " are not distinct enough");
    return out;
}

Corpus generate_corpus(const SyntheticCorpusSpec& spec) {
    spec.validate();
    Corpus corpus;
    corpus.templates = make_symbol_templates(spec);
    corpus.n_bins = spec.n_bins;
    corpus.vocab_size = spec.vocab_size;

    Rng rng(mix_seed(spec.seed, 0x75747473));
    corpus.utterances.reserve(spec.n_utterances);
    for (int u = 0; u < spec.n_utterances; ++u) {
        Utterance utt;
        int len = rng.uniform_int(spec.min_chars, spec.max_chars);
        utt.char_ids.reserve(len);
        for (int i = 0; i < len; ++i) utt.char_ids.push_back(rng.uniform_int(0, spec.vocab_size - 1));
        utt.text = ids_to_text(utt.char_ids);

        std::vector<double> frames;
        utt.durations.reserve(len);
        for (int id : utt.char_ids) {
            const SymbolTemplate& t = corpus.templates[static_cast<std::size_t>(id)];
            double jitter = 1.0 + spec.duration_jitter * rng.uniform(-1.0, 1.0);
            int dur = std::max(1, static_cast<int>(std::lround(t.base_duration * jitter)));
            utt.durations.push_back(dur);
            for (int f = 0; f < dur; ++f)
                for (int b = 0; b < spec.n_bins; ++b)
                    frames.push_back(t.profile[b] + spec.noise_std * rng.normal());
        }
        int n = static_cast<int>(frames.size()) / spec.n_bins;
        utt.spectrogram = Tensor::from_data({n, spec.n_bins}, std::move(frames));
        corpus.utterances.push_back(std::move(utt));
    }
    return corpus;
}

double Corpus::mean_frames() const {
    if (utterances.empty()) return 0.0;
    double s = 0.0;
    for (const auto& u : utterances) s += u.n_frames();
    return s / static_cast<double>(utterances.size());
}

namespace {

std::string utt_id(std::size_t index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "utt_%05zu", index);
    return buf;
}

}  // namespace

void write_corpus_dir(const Corpus& corpus, const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create corpus directory " + dir + ": " + ec.message());
    std::ostringstream index;
    for (std::size_t i = 0; i < corpus.utterances.size(); ++i) {
        const Utterance& u = corpus.utterances[i];
        std::string id = utt_id(i);
        write_vspg(dir + "/" + id + ".vspg", u.spectrogram);
        index << id << "\t" << u.text << "\t" << u.n_frames() << "\n";
    }
    std::ofstream os(dir + "/index.tsv", std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + dir + "/index.tsv");
    os << index.str();
    if (!os) throw IoError("write failure on " + dir + "/index.tsv");
}

Corpus read_corpus_dir(const std::string& dir, int vocab_size) {
    std::ifstream is(dir + "/index.tsv");
    if (!is) throw IoError("cannot open corpus index " + dir + "/index.tsv");
    Corpus corpus;
    corpus.vocab_size = vocab_size;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto t1 = line.find('\t');
        auto t2 = (t1 == std::string::npos) ? std::string::npos : line.find('\t', t1 + 1);
        if (t2 == std::string::npos)
            throw IoError("corpus index line " + std::to_string(lineno) + ": expected 3 fields");
        Utterance u;
        std::string id = line.substr(0, t1);
        u.text = line.substr(t1 + 1, t2 - t1 - 1);
        int frames = std::stoi(line.substr(t2 + 1));
        u.char_ids = text_to_ids(u.text, vocab_size);
        u.spectrogram = read_vspg(dir + "/" + id + ".vspg");
        if (u.n_frames() != frames)
            throw IoError("corpus index frame count mismatch for " + id);
        if (corpus.n_bins == 0) corpus.n_bins = u.spectrogram.dim(1);
        corpus.utterances.push_back(std::move(u));
    }
    if (corpus.utterances.empty()) throw IoError("corpus index " + dir + " holds no utterances");
    return corpus;
}

}  // namespace vaenar
