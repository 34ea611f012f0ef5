#include "vaenar/training.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace vaenar {

namespace fs = std::filesystem;

void RFSchedule::validate() const {
    if (floor_r < 1 || initial_r < floor_r)
        throw ConfigError("rf schedule: need initial_r >= floor_r >= 1");
    if (step_every < 1) throw ConfigError("rf schedule: step_every must be >= 1");
}

int RFSchedule::r_at_epoch(int epoch) const {
    if (epoch < 0) throw ConfigError("r_at_epoch: epoch must be >= 0");
    int r = initial_r - epoch / step_every;
    return std::max(floor_r, r);
}

Adam::Adam(const AdamConfig& cfg, const ParamRegistry& params) : cfg_(cfg) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (const auto& p : params.items()) {
        std::size_t n = p.trainable ? p.tensor.size() : 0;
        m_.emplace_back(n, 0.0);
        v_.emplace_back(n, 0.0);
    }
}

void Adam::step(const ParamRegistry& params) {
    if (m_.size() != params.size()) throw ConfigError("adam: registry size changed");
    // validate all gradients before touching any state
    for (const auto& p : params.items()) {
        if (!p.trainable) continue;
        if (p.tensor.grad_nonfinite())
            throw NumericError("adam: non-finite gradient in parameter '" + p.name + "'");
    }
    ++step_count_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const ParamRef& p = params.items()[i];
        if (!p.trainable) continue;
        const std::vector<double>& g = p.tensor.grad();
        std::vector<double>& m = m_[i];
        std::vector<double>& v = v_[i];
        std::vector<double> delta(p.tensor.size(), 0.0);
        for (std::size_t j = 0; j < delta.size(); ++j) {
            double gj = g.empty() ? 0.0 : g[j];
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
            double mhat = m[j] / bc1;
            double vhat = v[j] / bc2;
            delta[j] = -cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
        p.tensor.update_value(delta);
    }
}

std::vector<MomentRecord> Adam::export_moments(const ParamRegistry& params) const {
    std::vector<MomentRecord> out;
    out.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params.items()[i].trainable) continue;
        out.push_back(MomentRecord{params.items()[i].name, m_[i], v_[i]});
    }
    return out;
}

void Adam::import_moments(const ParamRegistry& params, const std::vector<MomentRecord>& moments,
                          std::uint64_t step_count) {
    std::size_t k = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const ParamRef& p = params.items()[i];
        if (!p.trainable) continue;
        if (k >= moments.size() || moments[k].name != p.name)
            throw IoError("checkpoint optimizer state does not match parameter '" + p.name + "'");
        if (moments[k].m.size() != p.tensor.size() || moments[k].v.size() != p.tensor.size())
            throw IoError("checkpoint optimizer state has wrong size for '" + p.name + "'");
        m_[i] = moments[k].m;
        v_[i] = moments[k].v;
        ++k;
    }
    if (k != moments.size()) throw IoError("checkpoint optimizer state has extra records");
    step_count_ = step_count;
}

void scale_gradients(const ParamRegistry& params, double k) {
    for (const auto& p : params.items()) {
        if (!p.trainable) continue;
        auto n = p.tensor.node();
        for (double& g : n->grad) g *= k;
    }
}

double clip_gradients(const ParamRegistry& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params.items()) {
        if (!p.trainable) continue;
        for (double g : p.tensor.grad()) sq += g * g;
    }
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) scale_gradients(params, max_norm / norm);
    return norm;
}

AlignmentDiagnostics alignment_diagnostics(const Tensor& w) {
    Tensor wm = w;
    if (w.rank() == 3) {
        AttentionWeights aw{w};
        wm = aw.head_mean();
    }
    if (wm.rank() != 2) throw ShapeError("alignment_diagnostics: expected [N_r, M] weights");
    int n_r = wm.dim(0), m = wm.dim(1);
    const auto& wv = wm.data();

    double band = std::max(1.0, 0.1 * m);
    double mass = 0.0;
    for (int i = 0; i < n_r; ++i) {
        double center = static_cast<double>(i) * m / n_r;
        double row_mass = 0.0;
        for (int j = 0; j < m; ++j)
            if (std::fabs(j - center) <= band) row_mass += wv[static_cast<std::size_t>(i) * m + j];
        mass += row_mass;
    }

    AlignmentDiagnostics d;
    d.diagonality = mass / n_r;
    if (n_r <= 1) {
        d.monotonicity = 1.0;
        return d;
    }
    auto argmax_row = [&](int i) {
        int best = 0;
        double bv = wv[static_cast<std::size_t>(i) * m];
        for (int j = 1; j < m; ++j) {
            double v = wv[static_cast<std::size_t>(i) * m + j];
            if (v > bv) {
                bv = v;
                best = j;
            }
        }
        return best;
    };
    int nondecreasing = 0;
    int prev = argmax_row(0);
    for (int i = 1; i < n_r; ++i) {
        int cur = argmax_row(i);
        if (cur >= prev) ++nondecreasing;
        prev = cur;
    }
    d.monotonicity = static_cast<double>(nondecreasing) / (n_r - 1);
    return d;
}

namespace {

std::string fmt_double(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc{}) throw Error("double formatting failed");
    return std::string(buf, ptr);
}

}  // namespace

std::string metrics_csv_header() {
    return "epoch,r,recon,kl,length,total,diagonality,monotonicity";
}

std::string metrics_csv_row(const MetricsRow& row) {
    std::string s = std::to_string(row.epoch) + "," + std::to_string(row.r);
    for (double v : {row.recon, row.kl, row.length, row.total, row.diagonality,
                     row.monotonicity})
        s += "," + fmt_double(v);
    return s;
}

void split_corpus(std::size_t n, double val_fraction, std::uint64_t seed,
                  std::vector<std::size_t>& train_idx, std::vector<std::size_t>& val_idx) {
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    Rng rng(mix_seed(seed, 0x73706c69));
    for (std::size_t i = n; i > 1; --i) {
        std::size_t j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1));
        std::swap(perm[i - 1], perm[j]);
    }
    std::size_t n_val = static_cast<std::size_t>(std::ceil(val_fraction * static_cast<double>(n)));
    if (n_val >= n) n_val = n > 1 ? n - 1 : 0;
    train_idx.assign(perm.begin(), perm.end() - static_cast<std::ptrdiff_t>(n_val));
    val_idx.assign(perm.end() - static_cast<std::ptrdiff_t>(n_val), perm.end());
}

Checkpoint make_checkpoint(const VaenarModel& model, const Adam& opt, const RFSchedule& sched,
                           int epochs_done, const std::string& config_text) {
    Checkpoint ckpt;
    for (const auto& p : model.registry().items()) ckpt.tensors.emplace_back(p.name, p.tensor);
    ckpt.lr = opt.config().lr;
    ckpt.beta1 = opt.config().beta1;
    ckpt.beta2 = opt.config().beta2;
    ckpt.eps = opt.config().eps;
    ckpt.step_count = opt.step_count();
    ckpt.moments = opt.export_moments(model.registry());
    ckpt.initial_r = static_cast<std::uint32_t>(sched.initial_r);
    ckpt.r_step_every = static_cast<std::uint32_t>(sched.step_every);
    ckpt.floor_r = static_cast<std::uint32_t>(sched.floor_r);
    ckpt.epochs_done = static_cast<std::uint32_t>(epochs_done);
    ckpt.config_text = config_text;
    return ckpt;
}

void load_model_params(VaenarModel& model, const Checkpoint& ckpt) {
    const auto& items = model.registry().items();
    if (ckpt.tensors.size() != items.size())
        throw IoError("checkpoint holds " + std::to_string(ckpt.tensors.size()) +
                      " tensors, model expects " + std::to_string(items.size()));
    for (std::size_t i = 0; i < items.size(); ++i) {
        const auto& [name, t] = ckpt.tensors[i];
        if (name != items[i].name)
            throw IoError("checkpoint tensor '" + name + "' does not match parameter '" +
                          items[i].name + "'");
        if (t.shape() != items[i].tensor.shape())
            throw IoError("checkpoint tensor '" + name + "' has shape " + shape_str(t.shape()) +
                          ", expected " + shape_str(items[i].tensor.shape()));
        items[i].tensor.assign_value(t.data());
    }
}

namespace {

struct EpochStats {
    double recon = 0.0, kl = 0.0, length = 0.0, total = 0.0;
    int count = 0;

    void add(const LossBreakdown& lb) {
        recon += lb.recon_mse;
        kl += lb.kl;
        length += lb.length_loss;
        total += lb.total;
        ++count;
    }
};

// Validation pass: deterministic posterior-mean forward; returns mean
// reconstruction error and last-block alignment diagnostics.
struct ValResult {
    double recon = 0.0;
    double diagonality = 0.0;
    double monotonicity = 0.0;
};

ValResult validate_batch(const VaenarModel& model, const Corpus& corpus,
                         const std::vector<std::size_t>& val_idx, int r) {
    NoGrad no_grad;
    EvalCtx ctx{};
    ValResult out;
    if (val_idx.empty()) return out;
    for (std::size_t idx : val_idx) {
        const Utterance& utt = corpus.utterances[idx];
        Tensor memory = model.encode_text(utt.char_ids, ctx);
        Tensor y_red = reduce_spectrogram(utt.spectrogram, r);
        PosteriorParams p = model.posterior_encode(y_red, memory, r, ctx);
        DecodeResult dec =
            model.decode_spectrogram(p.mean, memory, r, utt.n_frames(), ctx);
        Tensor d = sub(utt.spectrogram, dec.post);
        out.recon += mean(mul(d, d)).item();
        AlignmentDiagnostics diag =
            alignment_diagnostics(dec.cross_weights.back().head_mean());
        out.diagonality += diag.diagonality;
        out.monotonicity += diag.monotonicity;
    }
    double n = static_cast<double>(val_idx.size());
    out.recon /= n;
    out.diagonality /= n;
    out.monotonicity /= n;
    return out;
}

void append_metrics(const std::string& path, const std::vector<MetricsRow>& rows) {
    bool fresh = !fs::exists(path);
    std::ofstream os(path, std::ios::app | std::ios::binary);
    if (!os) throw IoError("cannot open metrics log " + path);
    if (fresh) os << metrics_csv_header() << "\n";
    for (const auto& r : rows) os << metrics_csv_row(r) << "\n";
}

}  // namespace

TrainResult train(VaenarModel& model, const Corpus& corpus, const RunConfig& cfg,
                  const std::string& out_dir, const Checkpoint* resume) {
    fs::create_directories(out_dir);
    const std::string metrics_path = out_dir + "/metrics.csv";
    const std::string latest_path = out_dir + "/ckpt_latest.vnck";
    const std::string best_path = out_dir + "/best.vnck";
    const std::string final_path = out_dir + "/model.vnck";

    RFSchedule sched{cfg.initial_r, cfg.r_step_every, cfg.floor_r};
    sched.validate();
    AdamConfig adam_cfg{cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps};
    Adam opt(adam_cfg, model.registry());

    int start_epoch = 0;
    if (resume) {
        load_model_params(model, *resume);
        opt.import_moments(model.registry(), resume->moments, resume->step_count);
        start_epoch = static_cast<int>(resume->epochs_done);
    }

    // length bias resolved against the training corpus when set to auto
    RunConfig effective = cfg;
    if (effective.length_bias < 0)
        effective.length_bias =
            static_cast<int>(std::lround(0.1 * corpus.mean_frames()));
    const std::string config_text = effective.to_text();

    std::vector<std::size_t> train_idx, val_idx;
    split_corpus(corpus.utterances.size(), cfg.val_fraction, cfg.seed, train_idx, val_idx);
    if (train_idx.empty()) throw ConfigError("train: empty training split");

    TrainResult result;
    result.final_checkpoint = final_path;
    result.best_checkpoint = best_path;

    // last-good checkpoint exists from the very start
    write_vnck(latest_path, make_checkpoint(model, opt, sched, start_epoch, config_text));

    double best_val = std::numeric_limits<double>::infinity();
    model.registry().zero_grads();

    for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        int r = sched.r_at_epoch(epoch);
        Rng ep_rng(mix_seed(cfg.seed, 1000003ull * (static_cast<std::uint64_t>(epoch) + 1)));

        std::vector<std::size_t> order = train_idx;
        for (std::size_t i = order.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(
                ep_rng.uniform_int(0, static_cast<int>(i) - 1));
            std::swap(order[i - 1], order[j]);
        }

        EpochStats stats;
        EvalCtx ctx{&ep_rng, true};
        int pending = 0;
        auto flush_step = [&]() {
            if (pending == 0) return;
            scale_gradients(model.registry(), 1.0 / pending);
            clip_gradients(model.registry(), cfg.grad_clip);
            opt.step(model.registry());
            model.registry().zero_grads();
            pending = 0;
        };

        for (std::size_t pos = 0; pos < order.size(); ++pos) {
            const Utterance& utt = corpus.utterances[order[pos]];
            int n_r = (utt.n_frames() + r - 1) / r;
            std::vector<double> nv(static_cast<std::size_t>(n_r) * cfg.d_z);
            for (auto& x : nv) x = ep_rng.normal();
            Tensor noise = Tensor::from_data({n_r, cfg.d_z}, std::move(nv));

            Tape tape;
            LossBreakdown lb;
            try {
                lb = model.compute_loss(utt.spectrogram, utt.char_ids, noise, r, cfg.alpha,
                                        cfg.beta, ctx);
            } catch (const NumericError& e) {
                result.status = TrainStatus::NanHalt;
                result.halt_reason = e.what();
                result.epochs_done = epoch;
                append_metrics(metrics_path, result.metrics);
                return result;
            }
            if (!std::isfinite(lb.total)) {
                result.status = TrainStatus::NanHalt;
                result.halt_reason = "non-finite training loss";
                result.epochs_done = epoch;
                append_metrics(metrics_path, result.metrics);
                return result;
            }
            tape.backward(lb.total_tensor);
            stats.add(lb);
            ++pending;
            if (pending == cfg.batch_size || pos + 1 == order.size()) {
                try {
                    flush_step();
                } catch (const NumericError& e) {
                    result.status = TrainStatus::NanHalt;
                    result.halt_reason = e.what();
                    result.epochs_done = epoch;
                    append_metrics(metrics_path, result.metrics);
                    return result;
                }
            }
        }

        ValResult val = validate_batch(model, corpus, val_idx, r);

        MetricsRow row;
        row.epoch = epoch;
        row.r = r;
        row.recon = stats.recon / stats.count;
        row.kl = stats.kl / stats.count;
        row.length = stats.length / stats.count;
        row.total = stats.total / stats.count;
        row.diagonality = val.diagonality;
        row.monotonicity = val.monotonicity;
        result.metrics.push_back(row);

        int done = epoch + 1;
        if (done % cfg.checkpoint_every == 0)
            write_vnck(latest_path, make_checkpoint(model, opt, sched, done, config_text));
        if (!val_idx.empty() && val.recon < best_val) {
            best_val = val.recon;
            write_vnck(best_path, make_checkpoint(model, opt, sched, done, config_text));
        }
    }

    result.epochs_done = cfg.epochs;
    append_metrics(metrics_path, result.metrics);
    Checkpoint final_ckpt = make_checkpoint(model, opt, sched, cfg.epochs, config_text);
    write_vnck(latest_path, final_ckpt);
    write_vnck(final_path, final_ckpt);
    return result;
}

}  // namespace vaenar
