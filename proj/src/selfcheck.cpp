#include "vaenar/selfcheck.hpp"

#include <cmath>
#include <functional>
#include <sstream>

#include "vaenar/glow.hpp"
#include "vaenar/model.hpp"

namespace vaenar {

namespace {

std::vector<double> random_vec(std::size_t n, Rng& rng, double scale = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = scale * rng.normal();
    return v;
}

double max_rel_err(const std::vector<double>& a, const std::vector<double>& b,
                   double floor = 1e-4) {
    if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double denom = std::max({std::fabs(a[i]), std::fabs(b[i]), floor});
        worst = std::max(worst, std::fabs(a[i] - b[i]) / denom);
    }
    return worst;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        worst = std::max(worst, std::fabs(a[i] - b[i]));
    return worst;
}

// Recursive cofactor expansion, usable up to ~8x8; independent of the LU
// path used by the implementation.
double cofactor_det(const std::vector<double>& m, int n) {
    if (n == 1) return m[0];
    if (n == 2) return m[0] * m[3] - m[1] * m[2];
    double det = 0.0;
    for (int c = 0; c < n; ++c) {
        std::vector<double> minor;
        minor.reserve(static_cast<std::size_t>(n - 1) * (n - 1));
        for (int r = 1; r < n; ++r)
            for (int cc = 0; cc < n; ++cc)
                if (cc != c) minor.push_back(m[static_cast<std::size_t>(r) * n + cc]);
        double term = m[static_cast<std::size_t>(c)] * cofactor_det(minor, n - 1);
        det += (c % 2 == 0) ? term : -term;
    }
    return det;
}

GlowConfig small_glow_config(int d_z, int n_blocks) {
    GlowConfig g;
    g.d_z = d_z;
    g.n_blocks = n_blocks;
    g.coupling_blocks = 1;
    g.attn = AttentionConfig{16, 2, 32, 0.0};
    return g;
}

ModelConfig small_model_config() {
    ModelConfig m;
    m.vocab_size = 8;
    m.n_bins = 4;
    m.d_model = 16;
    m.n_heads = 2;
    m.d_ffn = 32;
    m.d_z = 4;
    m.embed_dim = 8;
    m.conv_prenet_layers = 2;
    m.conv_prenet_kernel = 3;
    m.text_blocks = 1;
    m.posterior_blocks = 2;
    m.decoder_blocks = 2;
    m.flow_blocks = 2;
    m.coupling_blocks = 1;
    m.postnet_layers = 2;
    m.postnet_kernel = 3;
    m.postnet_channels = 6;
    m.dropout = 0.0;
    m.min_r = 2;
    m.max_r = 3;
    return m;
}

using CheckFn = std::function<CheckResult(const SelfCheckOptions&)>;

CheckResult make_result(const std::string& name, bool ok, const std::string& detail) {
    return CheckResult{name, ok, detail};
}

CheckResult check_softmax_rows(const SelfCheckOptions& opts) {
    Rng rng(mix_seed(opts.seed, 1));
    Tensor x = Tensor::from_data({5, 7}, random_vec(35, rng, 3.0));
    Mask m = Mask::causal(5);
    // pad mask to 7 columns: first 5 causal, last 2 never allowed
    Mask wide;
    wide.rows = 5;
    wide.cols = 7;
    wide.allow.assign(35, 0);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j <= i; ++j) wide.allow[static_cast<std::size_t>(i) * 7 + j] = 1;
    Tensor y = softmax_last(x, &wide);
    double worst = 0.0;
    for (int i = 0; i < 5; ++i) {
        double s = 0.0;
        for (int j = 0; j < 7; ++j) {
            double v = y.at({i, j});
            if (!wide.at(i, j) && v != 0.0) return make_result("softmax_rows", false,
                                                               "masked entry not exactly zero");
            s += v;
        }
        worst = std::max(worst, std::fabs(s - 1.0));
    }
    (void)m;
    return make_result("softmax_rows", worst < 1e-12,
                       "max row-sum deviation " + std::to_string(worst));
}

CheckResult check_grad(const char* name,
                       const std::function<Tensor(const Tensor&)>& f_taped,
                       const Tensor& x0, double tol = 1e-4) {
    Tensor x = Tensor::leaf(x0.shape(), x0.data());
    std::vector<double> analytic;
    {
        Tape tape;
        Tensor loss = f_taped(x);
        tape.backward(loss);
        analytic = x.grad();
    }
    Tensor fd = finite_diff_grad(
        [&](const Tensor& xv) { return f_taped(xv).item(); }, x0, 1e-4);
    double err = max_rel_err(analytic, fd.data());
    return make_result(name, err < tol, "max rel err " + std::to_string(err));
}

CheckResult check_grad_matmul(const SelfCheckOptions& opts) {
    Rng rng(mix_seed(opts.seed, 2));
    Tensor b = Tensor::from_data({5, 3}, random_vec(15, rng));
    Tensor x0 = Tensor::from_data({4, 5}, random_vec(20, rng));
    return check_grad("grad_matmul",
                      [&](const Tensor& x) { return sum(mul(matmul(x, b), matmul(x, b))); }, x0);
}

CheckResult check_grad_conv1d(const SelfCheckOptions& opts) {
    Rng rng(mix_seed(opts.seed, 3));
    Tensor k = Tensor::from_data({3, 2, 4}, random_vec(24, rng));
    Tensor x0 = Tensor::from_data({6, 2}, random_vec(12, rng));
    return check_grad("grad_conv1d",
                      [&](const Tensor& x) {
                          Tensor y = conv1d_same(x, k);
                          return sum(mul(y, y));
                      },
                      x0, 1e-5);
}

CheckResult check_grad_softmax(const SelfCheckOptions& opts) {
    Rng rng(mix_seed(opts.seed, 4));
    Tensor w = Tensor::from_data({4, 6}, random_vec(24, rng));
    Tensor x0 = Tensor::from_data({4, 6}, random_vec(24, rng));
    return check_grad("grad_softmax",
                      [&](const Tensor& x) { return sum(mul(softmax_last(x), w)); }, x0);
}

CheckResult check_grad_normalize(const SelfCheckOptions& opts) {
    Rng rng(mix_seed(opts.seed, 5));
    Tensor w = Tensor::from_data({5, 8}, random_vec(40, rng));
    Tensor x0 = Tensor::from_data({5, 8}, random_vec(40, rng));
    return check_grad("grad_layernorm",
                      [&](const Tensor& x) { return sum(mul(normalize_last(x), w)); }, x0);
}

CheckResult check_actnorm_logdet(const SelfCheckOptions& opts) {
    Rng rng(mix_seed(opts.seed, 6));
    int d_z = 6, n_r = 4;
    ActNorm an(d_z);
    std::vector<double> sc = random_vec(d_z, rng, 0.5);
    for (auto& s : sc) s += (s >= 0 ? 1.0 : -1.0);  // keep away from zero
    an.scale.assign_value(sc);
    an.bias.assign_value(random_vec(d_z, rng));

    Tensor x = Tensor::from_data({n_r, d_z}, random_vec(static_cast<std::size_t>(n_r) * d_z, rng));
    auto fwd = an.apply(x, FlowDirection::Forward);
    auto inv = an.apply(fwd.y, FlowDirection::Inverse);

    double analytic = fwd.logdet.item();
    if (opts.flip_actnorm_logdet_sign) analytic = -analytic;
    double direct = 0.0;
    for (double s : sc) direct += std::log(std::fabs(s));
    direct *= n_r;

    double round_trip = max_abs_diff(inv.y.data(), x.data());
    bool ok = std::fabs(analytic - direct) < 1e-10 && round_trip < 1e-10;
    std::ostringstream os;
    os << "logdet diff " << std::fabs(analytic - direct) << ", roundtrip " << round_trip;
    return make_result("actnorm_logdet", ok, os.str());
}

CheckResult check_perm_logdet(const SelfCheckOptions& opts) {
    Rng rng(mix_seed(opts.seed, 7));
    int d_z = 5, n_r = 3;
    Invertible1x1 perm(d_z, rng);
    // move away from the rotation so |det| != 1
    std::vector<double> w = perm.w.data();
    for (auto& v : w) v += 0.1 * rng.normal();
    perm.w.assign_value(w);

    Tensor x = Tensor::from_data({n_r, d_z}, random_vec(static_cast<std::size_t>(n_r) * d_z, rng));
    auto fwd = perm.apply(x, FlowDirection::Forward);
    auto inv = perm.apply(fwd.y, FlowDirection::Inverse);

    double analytic = fwd.logdet.item();
    double oracle = n_r * std::log(std::fabs(cofactor_det(w, d_z)));
    double round_trip = max_abs_diff(inv.y.data(), x.data());
    bool ok = std::fabs(analytic - oracle) < 1e-8 && round_trip < 1e-9;
    std::ostringstream os;
    os << "logdet diff " << std::fabs(analytic - oracle) << ", roundtrip " << round_trip;
    return make_result("perm_logdet", ok, os.str());
}

CheckResult check_coupling_roundtrip(const SelfCheckOptions& opts) {
    Rng rng(mix_seed(opts.seed, 8));
    GlowConfig g = small_glow_config(6, 1);
    AffineCoupling coupling(g, rng);
    // non-identity transform
    coupling.out_proj.w.assign_value(random_vec(coupling.out_proj.w.size(), rng, 0.3));
    coupling.out_proj.b.assign_value(random_vec(coupling.out_proj.b.size(), rng, 0.3));

    Tensor memory = Tensor::from_data({4, 16}, random_vec(64, rng));
    Tensor x = Tensor::from_data({3, 6}, random_vec(18, rng));
    EvalCtx ctx{};
    auto fwd = coupling.apply(x, memory, FlowDirection::Forward, ctx);
    auto inv = coupling.apply(fwd.y, memory, FlowDirection::Inverse, ctx);
    double err = max_abs_diff(inv.y.data(), x.data());
    double logdet_sym = std::fabs(fwd.logdet.item() + inv.logdet.item());
    bool ok = err < 1e-8 && logdet_sym < 1e-10;
    return make_result("coupling_roundtrip", ok, "roundtrip err " + std::to_string(err));
}

CheckResult check_flow_roundtrip(const SelfCheckOptions& opts) {
    Rng rng(mix_seed(opts.seed, 9));
    GlowConfig g = small_glow_config(8, 3);
    GlowPrior prior(g, rng);
    for (auto& blk : prior.blocks()) {
        blk.coupling.out_proj.w.assign_value(
            random_vec(blk.coupling.out_proj.w.size(), rng, 0.2));
        blk.actnorm.scale.assign_value([&] {
            auto v = random_vec(8, rng, 0.3);
            for (auto& s : v) s += (s >= 0 ? 1.0 : -1.0);
            return v;
        }());
    }
    Tensor memory = Tensor::from_data({5, 16}, random_vec(80, rng));
    Tensor x = Tensor::from_data({4, 8}, random_vec(32, rng));
    EvalCtx ctx{};
    auto fwd = prior.transform(x, memory, FlowDirection::Forward, ctx);
    auto inv = prior.transform(fwd.y, memory, FlowDirection::Inverse, ctx);
    double err = max_abs_diff(inv.y.data(), x.data());
    return make_result("flow_roundtrip", err < 1e-8, "roundtrip err " + std::to_string(err));
}

CheckResult check_density_consistency(const SelfCheckOptions& opts) {
    Rng rng(mix_seed(opts.seed, 10));
    GlowConfig g = small_glow_config(6, 2);
    GlowPrior prior(g, rng);
    for (auto& blk : prior.blocks())
        blk.coupling.out_proj.w.assign_value(
            random_vec(blk.coupling.out_proj.w.size(), rng, 0.2));
    Tensor memory = Tensor::from_data({3, 16}, random_vec(48, rng));
    Tensor u = Tensor::from_data({2, 6}, random_vec(12, rng));
    EvalCtx ctx{};
    auto fwd = prior.transform(u, memory, FlowDirection::Forward, ctx);
    double lhs = prior.log_density(fwd.y, memory, ctx).item() + fwd.logdet.item();
    double rhs = standard_normal_logpdf(u).item();
    double err = std::fabs(lhs - rhs);
    return make_result("density_consistency", err < 1e-8, "mismatch " + std::to_string(err));
}

CheckResult check_grad_glow_density(const SelfCheckOptions& opts) {
    Rng rng(mix_seed(opts.seed, 11));
    GlowConfig g = small_glow_config(4, 2);
    GlowPrior prior(g, rng);
    for (auto& blk : prior.blocks())
        blk.coupling.out_proj.w.assign_value(
            random_vec(blk.coupling.out_proj.w.size(), rng, 0.2));
    Tensor memory = Tensor::from_data({3, 16}, random_vec(48, rng));
    Tensor z0 = Tensor::from_data({2, 4}, random_vec(8, rng));
    EvalCtx ctx{};
    return check_grad("grad_glow_density",
                      [&](const Tensor& z) { return prior.log_density(z, memory, ctx); }, z0);
}

CheckResult kl_mc_case(const char* name, double mu, const SelfCheckOptions& opts) {
    Rng rng(mix_seed(opts.seed, 12));
    GlowConfig g = small_glow_config(4, 2);
    GlowPrior prior(g, rng);
    prior.set_identity_permutations();
    EvalCtx ctx{};
    NoGrad no_grad;

    int n_r = 2, d_z = 4;
    Tensor memory = Tensor::from_data({3, 16}, random_vec(48, rng));
    Tensor mean = Tensor::constant({n_r, d_z}, mu);
    Tensor log_var = Tensor::zeros({n_r, d_z});

    const int n_samples = 4000;
    double acc = 0.0, acc2 = 0.0;
    for (int s = 0; s < n_samples; ++s) {
        std::vector<double> nv(static_cast<std::size_t>(n_r) * d_z);
        for (auto& x : nv) x = rng.normal();
        Tensor noise = Tensor::from_data({n_r, d_z}, std::move(nv));
        Tensor z = add(mean, noise);  // log_var = 0
        double est = VaenarModel::gaussian_logpdf(z, mean, log_var).item() -
                     prior.log_density(z, memory, ctx).item();
        acc += est;
        acc2 += est * est;
    }
    double est_mean = acc / n_samples;
    double var = acc2 / n_samples - est_mean * est_mean;
    double stderr_ = std::sqrt(std::max(var, 0.0) / n_samples);
    double expected = 0.5 * mu * mu * n_r * d_z;  // ||mu||^2 / 2
    double diff = std::fabs(est_mean - expected);
    bool ok = diff <= 3.0 * stderr_ + 1e-12;
    std::ostringstream os;
    os << "mean " << est_mean << " expected " << expected << " stderr " << stderr_;
    return make_result(name, ok, os.str());
}

CheckResult check_kl_zero(const SelfCheckOptions& opts) { return kl_mc_case("kl_identity_zero", 0.0, opts); }

CheckResult check_kl_mean(const SelfCheckOptions& opts) { return kl_mc_case("kl_identity_mean", 0.7, opts); }

// Perturbation helpers: exact equality of the unaffected prefix.
bool prefix_equal(const Tensor& a, const Tensor& b, int rows) {
    int cols = a.dim(-1);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
            if (a.at({i, j}) != b.at({i, j})) return false;
    return true;
}

CheckResult check_causality_posterior(const SelfCheckOptions& opts) {
    Rng rng(mix_seed(opts.seed, 13));
    VaenarModel model(small_model_config(), opts.seed);
    EvalCtx ctx{};
    NoGrad no_grad;
    int r = 2, n = 12;
    std::vector<int> ids{1, 2, 3};
    Tensor memory = model.encode_text(ids, ctx);
    Tensor y = Tensor::from_data({n, 4}, random_vec(48, rng));
    Tensor y_red = reduce_spectrogram(y, r);
    PosteriorParams base = model.posterior_encode(y_red, memory, r, ctx);

    int j = 3;  // perturb reduced frame 3
    std::vector<double> bumped = y_red.data();
    for (int c = 0; c < y_red.dim(1); ++c) bumped[static_cast<std::size_t>(j) * y_red.dim(1) + c] += 1.5;
    PosteriorParams pert =
        model.posterior_encode(Tensor::from_data(y_red.shape(), bumped), memory, r, ctx);

    bool ok = prefix_equal(base.mean, pert.mean, j) && prefix_equal(base.log_var, pert.log_var, j);
    return make_result("causality_posterior", ok,
                       ok ? "frames < j bit-identical" : "leakage before perturbed frame");
}

CheckResult check_causality_decoder(const SelfCheckOptions& opts) {
    Rng rng(mix_seed(opts.seed, 14));
    VaenarModel model(small_model_config(), opts.seed);
    EvalCtx ctx{};
    NoGrad no_grad;
    int r = 2, n_r = 6;
    std::vector<int> ids{1, 2, 3, 4};
    Tensor memory = model.encode_text(ids, ctx);
    Tensor z = Tensor::from_data({n_r, 4}, random_vec(24, rng));
    DecodeResult base = model.decode_spectrogram(z, memory, r, -1, ctx);

    int j = 4;  // perturb latent frame 4 -> spectrogram frames < j*r must hold
    std::vector<double> bumped = z.data();
    for (int c = 0; c < 4; ++c) bumped[static_cast<std::size_t>(j) * 4 + c] += 2.0;
    DecodeResult pert =
        model.decode_spectrogram(Tensor::from_data(z.shape(), bumped), memory, r, -1, ctx);

    bool ok = prefix_equal(base.post, pert.post, j * r) && prefix_equal(base.pre, pert.pre, j * r);
    return make_result("causality_decoder", ok,
                       ok ? "frames < j*r bit-identical" : "leakage before perturbed frame");
}

CheckResult check_causality_coupling(const SelfCheckOptions& opts) {
    Rng rng(mix_seed(opts.seed, 15));
    GlowConfig g = small_glow_config(6, 2);
    GlowPrior prior(g, rng);
    for (auto& blk : prior.blocks())
        blk.coupling.out_proj.w.assign_value(
            random_vec(blk.coupling.out_proj.w.size(), rng, 0.2));
    Tensor memory = Tensor::from_data({3, 16}, random_vec(48, rng));
    EvalCtx ctx{};
    NoGrad no_grad;

    int n_r = 5, j = 2;  // frames > j perturbed; recon of frames <= j must hold
    Tensor z = Tensor::from_data({n_r, 6}, random_vec(30, rng));
    Tensor base = prior.transform(z, memory, FlowDirection::Inverse, ctx).y;
    std::vector<double> bumped = z.data();
    for (int i = j + 1; i < n_r; ++i)
        for (int c = 0; c < 6; ++c) bumped[static_cast<std::size_t>(i) * 6 + c] += 1.0;
    Tensor pert =
        prior.transform(Tensor::from_data(z.shape(), bumped), memory, FlowDirection::Inverse, ctx).y;

    bool ok = prefix_equal(base, pert, j + 1);
    return make_result("causality_coupling", ok,
                       ok ? "inverse frames <= j bit-identical" : "later frames leaked backwards");
}

const std::vector<std::pair<const char*, CheckFn>>& registry() {
    static const std::vector<std::pair<const char*, CheckFn>> checks = {
        {"softmax_rows", check_softmax_rows},
        {"grad_matmul", check_grad_matmul},
        {"grad_conv1d", check_grad_conv1d},
        {"grad_softmax", check_grad_softmax},
        {"grad_layernorm", check_grad_normalize},
        {"actnorm_logdet", check_actnorm_logdet},
        {"perm_logdet", check_perm_logdet},
        {"coupling_roundtrip", check_coupling_roundtrip},
        {"flow_roundtrip", check_flow_roundtrip},
        {"density_consistency", check_density_consistency},
        {"grad_glow_density", check_grad_glow_density},
        {"kl_identity_zero", check_kl_zero},
        {"kl_identity_mean", check_kl_mean},
        {"causality_posterior", check_causality_posterior},
        {"causality_decoder", check_causality_decoder},
        {"causality_coupling", check_causality_coupling},
    };
    return checks;
}

}  // namespace

int registered_check_count() { return static_cast<int>(registry().size()); }

std::vector<CheckResult> run_selfcheck(const SelfCheckOptions& opts) {
    std::vector<CheckResult> results;
    results.reserve(registry().size());
    for (const auto& [name, fn] : registry()) {
        try {
            results.push_back(fn(opts));
        } catch (const std::exception& e) {
            results.push_back(CheckResult{name, false, std::string("exception: ") + e.what()});
        }
    }
    return results;
}

int selfcheck_main(std::ostream& os, const SelfCheckOptions& opts) {
    auto results = run_selfcheck(opts);
    bool all_ok = true;
    for (const auto& r : results) {
        if (r.ok) {
            os << "ok " << r.name << "\n";
        } else {
            os << "FAIL " << r.name << ": " << r.detail << "\n";
            all_ok = false;
        }
    }
    return all_ok ? 0 : 1;
}

}  // namespace vaenar
