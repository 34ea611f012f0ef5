// Command-line entry point: corpus generation, training, synthesis,
// alignment export and the numerical self-check suite.
//
// Exit codes: 0 success, 1 self-check failure, 2 user/input error,
// 3 numerical halt.

#include <CLI11.hpp>
#include <charconv>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "vaenar/config.hpp"
#include "vaenar/corpus.hpp"
#include "vaenar/model.hpp"
#include "vaenar/selfcheck.hpp"
#include "vaenar/serialize.hpp"
#include "vaenar/training.hpp"
#include "vaenar/vocab.hpp"

namespace fs = std::filesystem;
using namespace vaenar;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailure = 1;
constexpr int kExitUserError = 2;
constexpr int kExitNumericHalt = 3;

std::string fmt_double(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc{}) throw Error("double formatting failed");
    return std::string(buf, ptr);
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << content;
    if (!os) throw IoError("write failure on " + path);
}

struct LoadedModel {
    RunConfig cfg;
    VaenarModel model;
    Checkpoint ckpt;
    int r_final = 1;
};

LoadedModel load_model(const std::string& checkpoint_path) {
    LoadedModel lm;
    lm.ckpt = read_vnck(checkpoint_path);
    lm.cfg = RunConfig::parse(lm.ckpt.config_text);
    lm.model = VaenarModel(lm.cfg.model(), lm.cfg.seed);
    load_model_params(lm.model, lm.ckpt);
    RFSchedule sched{static_cast<int>(lm.ckpt.initial_r), static_cast<int>(lm.ckpt.r_step_every),
                     static_cast<int>(lm.ckpt.floor_r)};
    int epoch = static_cast<int>(lm.ckpt.epochs_done);
    lm.r_final = sched.r_at_epoch(epoch > 0 ? epoch - 1 : 0);
    return lm;
}

int cmd_gen_corpus(const std::string& config_path, const std::string& out_dir) {
    RunConfig cfg = config_path.empty() ? RunConfig::desk() : RunConfig::parse_file(config_path);
    Corpus corpus = generate_corpus(cfg.corpus());
    write_corpus_dir(corpus, out_dir);
    write_text_file(out_dir + "/config_used.txt", cfg.to_text());
    std::cout << "wrote " << corpus.utterances.size() << " utterances to " << out_dir << "\n";
    return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& corpus_dir,
              const std::string& out_dir, const std::string& resume_path) {
    RunConfig cfg = config_path.empty() ? RunConfig::desk() : RunConfig::parse_file(config_path);
    fs::create_directories(out_dir);
    if (!config_path.empty()) {
        // verbatim copy of the input next to the canonical echo
        std::ifstream src(config_path, std::ios::binary);
        std::ostringstream ss;
        ss << src.rdbuf();
        write_text_file(out_dir + "/config.txt", ss.str());
    }
    write_text_file(out_dir + "/config_used.txt", cfg.to_text());

    Corpus corpus = corpus_dir.empty() ? generate_corpus(cfg.corpus())
                                       : read_corpus_dir(corpus_dir, cfg.vocab_size);

    Checkpoint resume;
    const Checkpoint* resume_ptr = nullptr;
    VaenarModel model(cfg.model(), cfg.seed);
    if (!resume_path.empty()) {
        resume = read_vnck(resume_path);
        resume_ptr = &resume;
    }

    TrainResult result = train(model, corpus, cfg, out_dir, resume_ptr);
    if (result.status == TrainStatus::NanHalt) {
        std::cerr << "training halted: " << result.halt_reason
                  << " (last good checkpoint: " << out_dir << "/ckpt_latest.vnck)\n";
        return kExitNumericHalt;
    }
    std::cout << "trained " << result.epochs_done << " epochs, checkpoint "
              << result.final_checkpoint << "\n";
    return kExitOk;
}

int cmd_synthesize(const std::string& checkpoint_path, const std::string& text,
                   const std::string& out_path, int length_bias, const std::string& noise,
                   std::uint64_t seed) {
    LoadedModel lm = load_model(checkpoint_path);
    std::vector<int> ids = text_to_ids(text, lm.cfg.vocab_size);
    int bias = (length_bias == std::numeric_limits<int>::min()) ? lm.cfg.length_bias : length_bias;
    if (bias < 0) bias = 0;

    NoiseMode mode;
    if (noise == "zeros") {
        mode = NoiseMode::Zeros;
    } else if (noise == "sample") {
        mode = NoiseMode::Sample;
    } else {
        throw ConfigError("--noise must be zeros or sample");
    }
    Rng noise_rng(mix_seed(seed, 0x6e6f6973));

    auto t0 = std::chrono::steady_clock::now();
    SynthesisResult res = lm.model.synthesize(ids, lm.r_final, bias, mode, &noise_rng);
    auto t1 = std::chrono::steady_clock::now();
    double secs = std::chrono::duration<double>(t1 - t0).count();

    write_vspg(out_path, res.spectrogram);
    std::cout << "predicted_frames " << fmt_double(res.predicted_frames) << "\n"
              << "realized_frames " << res.realized_frames << "\n"
              << "reduction_factor " << res.reduction_factor << "\n"
              << "elapsed_seconds " << fmt_double(secs) << "\n"
              << "frames_per_second " << fmt_double(res.realized_frames / secs) << "\n";
    return kExitOk;
}

int cmd_dump_alignment(const std::string& checkpoint_path, const std::string& text,
                       const std::string& out_path) {
    LoadedModel lm = load_model(checkpoint_path);
    std::vector<int> ids = text_to_ids(text, lm.cfg.vocab_size);
    int bias = lm.cfg.length_bias < 0 ? 0 : lm.cfg.length_bias;
    SynthesisResult res = lm.model.synthesize(ids, lm.r_final, bias, NoiseMode::Zeros);

    std::ostringstream os;
    for (std::size_t b = 0; b < res.cross_weights.size(); ++b) {
        os << "# block " << b << "\n";
        Tensor w = res.cross_weights[b].head_mean();
        for (int i = 0; i < w.dim(0); ++i) {
            for (int j = 0; j < w.dim(1); ++j) {
                if (j) os << ",";
                os << fmt_double(w.at({i, j}));
            }
            os << "\n";
        }
    }
    AlignmentDiagnostics diag = alignment_diagnostics(res.cross_weights.back().head_mean());
    std::string summary = "# diagonality=" + fmt_double(diag.diagonality) +
                          " monotonicity=" + fmt_double(diag.monotonicity);
    os << summary << "\n";
    write_text_file(out_path, os.str());
    std::cout << summary.substr(2) << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"non-autoregressive text-to-spectrogram model (desk scale)"};
    app.require_subcommand(1);

    std::string config_path, out_path, corpus_dir, resume_path, checkpoint_path, text;
    std::string noise = "zeros";
    int length_bias = std::numeric_limits<int>::min();
    std::uint64_t seed = 0;

    auto* gen = app.add_subcommand("gen-corpus", "generate a synthetic corpus");
    gen->add_option("--config", config_path, "run configuration file");
    gen->add_option("--out", out_path, "output directory")->required();

    auto* tr = app.add_subcommand("train", "train a model");
    tr->add_option("--config", config_path, "run configuration file");
    tr->add_option("--corpus", corpus_dir, "corpus directory (default: generate in memory)");
    tr->add_option("--out", out_path, "run output directory")->required();
    tr->add_option("--resume", resume_path, "checkpoint to resume from");

    auto* sy = app.add_subcommand("synthesize", "synthesize a spectrogram from text");
    sy->add_option("--checkpoint", checkpoint_path, "trained checkpoint")->required();
    sy->add_option("--text", text, "input text")->required();
    sy->add_option("--out", out_path, "output spectrogram file")->required();
    sy->add_option("--length-bias", length_bias, "frames added to the predicted length");
    sy->add_option("--noise", noise, "prior noise mode: zeros | sample");
    sy->add_option("--seed", seed, "noise seed for --noise sample");

    auto* da = app.add_subcommand("dump-alignment", "export decoder cross-attention as CSV");
    da->add_option("--checkpoint", checkpoint_path, "trained checkpoint")->required();
    da->add_option("--text", text, "input text")->required();
    da->add_option("--out", out_path, "output CSV file")->required();

    auto* sc = app.add_subcommand("selfcheck", "run the numerical verification suite");
    std::uint64_t selfcheck_seed = 1234;
    sc->add_option("--seed", selfcheck_seed, "seed for randomized checks");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUserError;
    }

    try {
        if (gen->parsed()) return cmd_gen_corpus(config_path, out_path);
        if (tr->parsed()) return cmd_train(config_path, corpus_dir, out_path, resume_path);
        if (sy->parsed())
            return cmd_synthesize(checkpoint_path, text, out_path, length_bias, noise, seed);
        if (da->parsed()) return cmd_dump_alignment(checkpoint_path, text, out_path);
        if (sc->parsed()) {
            SelfCheckOptions opts;
            opts.seed = selfcheck_seed;
            return selfcheck_main(std::cout, opts) == 0 ? kExitOk : kExitCheckFailure;
        }
    } catch (const NumericError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return kExitNumericHalt;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUserError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUserError;
    }
    return kExitUserError;
}
