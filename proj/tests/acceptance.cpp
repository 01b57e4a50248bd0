// Acceptance run: ten checks against independent references, one line each.
// argv[1] is the CLI binary, needed by the rerun-determinism check.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "grad_harness.hpp"
#include "model_ref.hpp"
#include "oracles.hpp"
#include "sml/hsi.hpp"
#include "sml/hvp.hpp"
#include "sml/kde.hpp"
#include "sml/landscape.hpp"
#include "sml/manifest.hpp"
#include "sml/model.hpp"
#include "sml/ops.hpp"
#include "sml/params.hpp"
#include "sml/rng.hpp"
#include "sml/tape.hpp"
#include "sml/train.hpp"

using namespace sml;
using gradcheck::OpUnderTest;
using gradcheck::run_grad_check;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Timer {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
};

bool report(int n, const char* label, bool ok, const std::string& detail) {
    std::printf("criterion %d (%s): %s - %s\n", n, label, ok ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
    return ok;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3g", v);
    return buf;
}

fs::path scratch_dir(const std::string& leaf) {
    const char* dir = std::getenv("TMPDIR");
    return fs::path(dir ? dir : "/tmp") / leaf;
}

ModelSpec micro_spec(MixerKind kind) {
    ModelSpec s;
    s.mixer = kind;
    s.stage_depths = {1};
    s.stage_channels = {4};
    s.patch_size = 3;
    s.bands = 5;
    s.classes = 3;
    s.heads = 2;
    s.mlp_ratio = 2;
    return s;
}

constexpr MixerKind kAllKinds[5] = {MixerKind::Cnn, MixerKind::Ssa, MixerKind::Csa,
                                    MixerKind::SsaCnn, MixerKind::CsaCnn};

// ---- criterion 1: tape gradients vs central differences, 64-bit ----

double mixer_grad_err(MixerKind kind) {
    ModelSpec spec = micro_spec(kind);
    SpectralNet<double> net(spec, 11);
    net.set_training(true);  // exercise the batch-stat path in CNN variants
    Rng rng(12);
    Tensor<double> x(Shape{2, spec.patch_size, spec.patch_size, spec.bands});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform() * 2.0 - 1.0;
    std::vector<std::size_t> labels = {0, 2};

    auto loss_value = [&](const std::vector<double>& theta) {
        net.params().assign_trainable(theta);
        Tape<double> tape;
        tape.set_grad_enabled(false);
        return label_smoothing_ce(net.forward(tape, x), labels, 0.1).value()[0];
    };

    std::vector<double> theta0 = net.params().flatten_trainable();
    Tape<double> tape;
    Var<double> loss = label_smoothing_ce(net.forward(tape, x), labels, 0.1);
    tape.backward(loss);
    std::vector<double> analytic = net.trainable_grads();
    std::vector<double> fd = oracle::fd_gradient(loss_value, theta0);
    net.params().assign_trainable(theta0);
    return oracle::max_rel_err(analytic, fd);
}

bool criterion1() {
    Timer timer;
    const double tol = 1e-5;
    double worst = 0;

    auto unary = [](auto fn) {
        return OpUnderTest{{Shape{2, 3}}, [fn](Tape<double>&, const std::vector<Var<double>>& in) {
                               return fn(in[0]);
                           }};
    };
    auto binary = [](auto fn) {
        return OpUnderTest{{Shape{2, 3}, Shape{2, 3}},
                           [fn](Tape<double>&, const std::vector<Var<double>>& in) {
                               return fn(in[0], in[1]);
                           }};
    };
    std::vector<OpUnderTest> ops_list;
    ops_list.push_back(unary([](Var<double> v) { return ops::gelu(v); }));
    ops_list.push_back(unary([](Var<double> v) { return ops::silu(v); }));
    ops_list.push_back(unary([](Var<double> v) { return ops::scale(v, 1.7); }));
    ops_list.push_back(unary([](Var<double> v) { return ops::add_scalar(v, -0.4); }));
    ops_list.push_back(unary([](Var<double> v) { return ops::softmax_lastdim(v); }));
    ops_list.push_back(unary([](Var<double> v) { return ops::log_softmax_lastdim(v); }));
    ops_list.push_back(binary([](Var<double> a, Var<double> b) { return ops::add(a, b); }));
    ops_list.push_back(binary([](Var<double> a, Var<double> b) { return ops::sub(a, b); }));
    ops_list.push_back(binary([](Var<double> a, Var<double> b) { return ops::mul(a, b); }));
    ops_list.push_back({{Shape{3, 4}, Shape{4, 2}},
                        [](Tape<double>&, const std::vector<Var<double>>& in) {
                            return ops::matmul(in[0], in[1]);
                        }});
    ops_list.push_back({{Shape{2, 2, 3}, Shape{2, 3, 2}},
                        [](Tape<double>&, const std::vector<Var<double>>& in) {
                            return ops::matmul_batched(in[0], in[1]);
                        }});
    ops_list.push_back({{Shape{2, 3}, Shape{4, 3}, Shape{4}},
                        [](Tape<double>&, const std::vector<Var<double>>& in) {
                            return ops::linear(in[0], in[1], in[2]);
                        }});
    ops_list.push_back({{Shape{3, 2}, Shape{2}},
                        [](Tape<double>&, const std::vector<Var<double>>& in) {
                            return ops::add_rowvec(in[0], in[1]);
                        }});
    ops_list.push_back({{Shape{3, 4}, Shape{4}, Shape{4}},
                        [](Tape<double>&, const std::vector<Var<double>>& in) {
                            return ops::layer_norm(in[0], in[1], in[2]);
                        },
                        [](double v) { return v + 2.0; }});
    ops_list.push_back({{Shape{2, 2, 3, 3}, Shape{2, 2, 3, 3}, Shape{2}},
                        [](Tape<double>&, const std::vector<Var<double>>& in) {
                            return ops::conv2d(in[0], in[1], in[2], 1);
                        }});
    ops_list.push_back({{Shape{2, 2, 2, 2}, Shape{2}, Shape{2}},
                        [](Tape<double>&, const std::vector<Var<double>>& in) {
                            Tensor<double> rm(Shape{2}, 0.0), rv(Shape{2}, 1.0);
                            return ops::batch_norm2d(in[0], in[1], in[2], rm, rv, true);
                        }});
    ops_list.push_back({{Shape{2, 2, 2, 2}, Shape{2}, Shape{2}},
                        [](Tape<double>&, const std::vector<Var<double>>& in) {
                            Tensor<double> rm(Shape{2}, 0.1), rv(Shape{2}, 0.9);
                            return ops::batch_norm2d(in[0], in[1], in[2], rm, rv, false);
                        }});
    ops_list.push_back({{Shape{2, 3, 2, 2}},
                        [](Tape<double>&, const std::vector<Var<double>>& in) {
                            return ops::global_avg_pool(in[0]);
                        }});
    ops_list.push_back({{Shape{2, 4, 3}},
                        [](Tape<double>&, const std::vector<Var<double>>& in) {
                            return ops::img2seq(ops::seq2img(in[0], 2));
                        }});
    ops_list.push_back({{Shape{2, 3, 4}},
                        [](Tape<double>&, const std::vector<Var<double>>& in) {
                            return ops::transpose_last2(in[0]);
                        }});
    ops_list.push_back({{Shape{2, 3, 4}},
                        [](Tape<double>&, const std::vector<Var<double>>& in) {
                            return ops::merge_heads(ops::split_heads(in[0], 2), 2);
                        }});
    ops_list.push_back({{Shape{5}},
                        [](Tape<double>&, const std::vector<Var<double>>& in) {
                            return ops::gather_permute(in[0], Shape{5}, {4, 2, 0, 1, 3});
                        }});
    std::uint64_t seed = 40;
    for (const auto& t : ops_list) worst = std::max(worst, run_grad_check(t, seed++));

    for (MixerKind kind : kAllKinds) worst = std::max(worst, mixer_grad_err(kind));

    double secs = timer.seconds();
    bool ok = worst < tol && secs < 60.0;
    return report(1, "gradient vs finite differences", ok,
                  "max rel err " + fmt(worst) + " (tol 1e-5) over " +
                      std::to_string(ops_list.size()) + " ops + 5 mixers in " + fmt(secs) + "s");
}

// ---- criterion 2: power-iteration eigenvalue vs dense reference ----

bool criterion2() {
    Timer timer;
    double worst_rel = 0;
    bool all_converged = true;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        Tensor<double> x(Shape{8, 4});
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
        std::vector<std::size_t> labels = {0, 1, 0, 1, 1, 0, 1, 0};

        ParameterStore<double> store;
        auto init = [&](Shape s) {
            Tensor<double> t(s);
            for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform() - 0.5;
            return t;
        };
        store.add("w1", init(Shape{3, 4}));
        store.add("b1", init(Shape{3}));
        store.add("w2", init(Shape{2, 3}));
        store.add("b2", init(Shape{2}));  // 23 parameters in total

        LossGradFn<double> loss_grad = [&x, &labels](ParameterStore<double>& p,
                                                     std::vector<double>* grad) -> double {
            Tape<double> tape;
            if (!grad) tape.set_grad_enabled(false);
            std::vector<Var<double>> leaves;
            for (auto& e : p.entries()) leaves.push_back(tape.leaf(e.value, true));
            Var<double> h = ops::gelu(ops::linear(tape.constant(x), leaves[0], leaves[1]));
            Var<double> loss = label_smoothing_ce(ops::linear(h, leaves[2], leaves[3]), labels, 0.0);
            if (grad) {
                tape.backward(loss);
                grad->clear();
                for (auto& l : leaves) {
                    auto g = l.grad();
                    grad->insert(grad->end(), g.vec().begin(), g.vec().end());
                }
            }
            return loss.value()[0];
        };

        std::vector<double> theta0 = store.flatten_trainable();
        auto f = [&](const std::vector<double>& th) {
            store.assign_trainable(th);
            double v = loss_grad(store, nullptr);
            return v;
        };
        double dense = oracle::max_eigenvalue(oracle::fd_hessian(f, theta0));
        store.assign_trainable(theta0);

        HvpFn<double> hvp = [&](const std::vector<double>& v) {
            return hvp_estimate(store, loss_grad, v);
        };
        Rng prng(seed + 100);
        EigenResult<double> res =
            top_hessian_eigenvalue(hvp, store.trainable_scalar_count(), prng, 1e-7, 2000);
        all_converged = all_converged && res.converged;
        worst_rel = std::max(worst_rel, std::fabs(res.lambda_max - dense) / std::fabs(dense));
    }
    double secs = timer.seconds();
    bool ok = worst_rel < 1e-3 && all_converged && secs < 30.0;
    return report(2, "top eigenvalue vs dense Hessian", ok,
                  "23-parameter net, 5 seeds, worst rel err " + fmt(worst_rel) +
                      " (tol 1e-3) in " + fmt(secs) + "s" +
                      (all_converged ? "" : "; power iteration failed to converge"));
}

// ---- criterion 3: disturbance grid on a known surface ----

bool criterion3() {
    std::vector<double> theta = {0.0, 0.0};
    DirectionPair<double> pair;
    pair.nu_x = {1.0, 0.0};
    pair.nu_y = {0.0, 1.0};

    EvaluatorFactory<double> paraboloid = []() -> LossEvaluator<double> {
        return [](const std::vector<double>& th) { return th[0] * th[0] + th[1] * th[1]; };
    };
    LandscapeGrid grid = landscape_grid(theta, pair, 11, paraboloid);
    double worst = 0;
    for (std::size_t i = 0; i < 11; ++i)
        for (std::size_t j = 0; j < 11; ++j) {
            double want = grid.w_values[i] * grid.w_values[i] + grid.w_values[j] * grid.w_values[j];
            worst = std::max(worst, std::fabs(grid.values[i][j] - want));
        }
    bool center_exact = grid.values[5][5] == 0.0;

    EvaluatorFactory<double> rigged = []() -> LossEvaluator<double> {
        return [](const std::vector<double>& th) {
            if (th[0] >= 0.999) return std::numeric_limits<double>::infinity();
            return th[0] * th[0] + th[1] * th[1];
        };
    };
    LandscapeGrid spiky = landscape_grid(theta, pair, 11, rigged);
    bool capped = spiky.overflow_cells.size() == 11;
    for (std::size_t j = 0; j < 11; ++j) capped = capped && spiky.values[10][j] == 100.0;

    EvaluatorFactory<double> huge = []() -> LossEvaluator<double> {
        return [](const std::vector<double>& th) {
            if (th[0] >= 0.999) return 1e12;
            return th[0] * th[0] + th[1] * th[1];
        };
    };
    LandscapeGrid sat = landscape_grid(theta, pair, 11, huge);
    bool sat_ok = sat.overflow_cells.empty() && sat.values[10][0] == 100.0;

    bool ok = worst < 1e-6 && center_exact && capped && sat_ok;
    return report(3, "landscape grid fidelity", ok,
                  "paraboloid max dev " + fmt(worst) + " (tol 1e-6), center " +
                      (center_exact ? "exactly 0" : "NOT 0") + ", divergent cells " +
                      (capped && sat_ok ? "capped at 100" : "mishandled"));
}

// ---- criterion 4: loss sanity ----

bool criterion4() {
    double worst = 0;
    for (std::size_t C : {2ul, 9ul, 14ul, 15ul}) {
        for (double alpha : {0.0, 0.1}) {
            Tape<double> tape;
            Var<double> logits = tape.constant(Tensor<double>(Shape{2, C}, 0.3));
            std::vector<std::size_t> labels = {0, C - 1};
            double loss = label_smoothing_ce(logits, labels, alpha).value()[0];
            worst = std::max(worst, std::fabs(loss - std::log(static_cast<double>(C))));
        }
    }

    Tensor<double> raw(Shape{3, 5});
    Rng rng(7);
    for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = rng.normal();
    std::vector<std::size_t> labels = {4, 0, 2};
    Tape<double> tape;
    Var<double> lg = tape.constant(raw);
    double smoothed_zero = label_smoothing_ce(lg, labels, 0.0).value()[0];
    Var<double> lp = ops::log_softmax_lastdim(lg);
    double s = 0;
    for (std::size_t b = 0; b < 3; ++b) s += lp.value().at(b, labels[b]);
    double plain = s * (-1.0 / 3.0);
    bool bitwise = smoothed_zero == plain;

    bool ok = worst < 1e-9 && bitwise;
    return report(4, "loss sanity", ok,
                  "uniform-logit dev from ln C " + fmt(worst) + " (tol 1e-9); alpha=0 " +
                      (bitwise ? "bit-identical to plain CE" : "DIFFERS from plain CE"));
}

// ---- criterion 5: every mixer preserves shape and reduces to identity ----

bool criterion5() {
    Timer timer;
    double worst = 0;
    std::size_t tested = 0;
    Rng rng(777);
    for (std::size_t t = 0; t < 100; ++t) {
        ModelSpec spec;
        spec.mixer = kAllKinds[t % 5];
        std::size_t stages = 1 + rng.index(2);
        spec.heads = 1 + rng.index(2);
        spec.stage_depths.clear();
        spec.stage_channels.clear();
        for (std::size_t s = 0; s < stages; ++s) {
            spec.stage_depths.push_back(1 + rng.index(2));
            spec.stage_channels.push_back(2 * (1 + rng.index(4)));  // 2..8, divisible by heads
        }
        spec.patch_size = 3 + 2 * rng.index(2);
        spec.bands = 2 + rng.index(5);
        spec.classes = 2 + rng.index(4);
        spec.mlp_ratio = 1 + rng.index(2);
        spec.validate();

        std::size_t B = 1 + rng.index(2);
        SpectralNet<double> net(spec, t);
        net.set_training(false);
        Tensor<double> x(Shape{B, spec.patch_size, spec.patch_size, spec.bands});
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform() * 2.0 - 1.0;

        Tensor<double> logits = net.logits(x);
        if (!(logits.shape() == Shape{B, spec.classes}) || !logits.all_finite())
            return report(5, "mixer shape and identity", false,
                          "bad logits shape or non-finite values at case " + std::to_string(t));

        modelref::zero_nonresidual_weights(net);
        Tensor<double> reduced = net.logits(x);
        for (std::size_t b = 0; b < B; ++b) {
            std::vector<double> want = modelref::identity_chain_logits(net, x, b);
            for (std::size_t c = 0; c < spec.classes; ++c) {
                double dev = std::fabs(reduced.at(b, c) - want[c]) / (1.0 + std::fabs(want[c]));
                worst = std::max(worst, dev);
            }
        }
        ++tested;
    }
    double secs = timer.seconds();
    bool ok = worst < 1e-9 && tested == 100 && secs < 60.0;
    return report(5, "mixer shape and identity", ok,
                  std::to_string(tested) + " random specs, identity dev " + fmt(worst) +
                      " (tol 1e-9) in " + fmt(secs) + "s");
}

// ---- criterion 6: stratified 5%/5% split against the reference counts ----

bool criterion6() {
    const std::vector<std::size_t> totals = {1251, 1254, 697,  1244, 1242, 325,  1268, 1244,
                                             1252, 1227, 1235, 1233, 469,  428,  660};
    const std::vector<std::size_t> want_train = {63, 62, 35, 62, 62, 17, 63, 62,
                                                 63, 61, 62, 61, 23, 22, 33};
    const std::vector<std::size_t> want_val = {62, 63, 35, 62, 62, 16, 64, 62,
                                               62, 62, 61, 62, 24, 21, 33};
    const std::vector<std::size_t> want_test = {1126, 1129, 627, 1120, 1118, 292, 1141, 1120,
                                                1127, 1104, 1112, 1110, 422,  385, 594};

    GroundTruth gt;
    gt.height = 1;
    gt.classes = 15;
    for (std::size_t k = 0; k < 15; ++k)
        for (std::size_t i = 0; i < totals[k]; ++i)
            gt.labels.push_back(static_cast<std::uint16_t>(k + 1));
    gt.width = gt.labels.size();

    std::size_t worst_dev = 0;
    for (std::uint64_t seed : {1ull, 2ull}) {
        SplitResult split = stratified_split(gt, 0.05, 0.05, seed);
        std::vector<std::size_t> tr(15, 0), va(15, 0), te(15, 0);
        for (const auto& r : split.train) tr[r.label - 1]++;
        for (const auto& r : split.val) va[r.label - 1]++;
        for (const auto& r : split.test) te[r.label - 1]++;
        for (std::size_t k = 0; k < 15; ++k) {
            auto dev = [](std::size_t a, std::size_t b) { return a > b ? a - b : b - a; };
            worst_dev = std::max({worst_dev, dev(tr[k], want_train[k]), dev(va[k], want_val[k]),
                                  dev(te[k], want_test[k])});
        }
    }
    bool ok = worst_dev <= 1;
    return report(6, "split counts vs reference table", ok,
                  "15 classes x 3 buckets x 2 seeds, worst deviation " +
                      std::to_string(worst_dev) + " (allowed 1)");
}

// ---- criterion 7: all five mixers learn the synthetic scene ----

struct TrainedScene {
    HsiCube cube;
    GroundTruth gt;
    SplitResult split;
    ModelSpec spec;
    std::optional<SpectralNet<float>> ssa_model;
};

ModelSpec scene_spec(MixerKind kind) {
    ModelSpec spec;
    spec.mixer = kind;
    spec.stage_depths = {1, 1};
    spec.stage_channels = {8, 8};
    spec.patch_size = 5;
    spec.bands = 16;
    spec.classes = 4;
    spec.heads = 2;
    spec.mlp_ratio = 2;
    return spec;
}

bool criterion7(TrainedScene& out) {
    auto [cube, gt] = synth_generate(4, 16, 80, 80, 0.05, 11);
    SplitResult split = stratified_split(gt, 0.3, 0.1, 1);

    // scenario sanity: a nearest-mean classifier on raw spectra must clear 99%
    std::vector<std::vector<double>> means(4, std::vector<double>(16, 0.0));
    std::vector<std::size_t> counts(4, 0);
    for (const auto& r : split.train) {
        for (std::size_t b = 0; b < 16; ++b) means[r.label - 1][b] += cube.at(r.row, r.col, b);
        counts[r.label - 1]++;
    }
    for (std::size_t k = 0; k < 4; ++k)
        for (auto& v : means[k]) v /= static_cast<double>(counts[k]);
    std::vector<std::vector<double>> spectra;
    std::vector<std::size_t> truth;
    for (const auto& r : split.test) {
        std::vector<double> s(16);
        for (std::size_t b = 0; b < 16; ++b) s[b] = cube.at(r.row, r.col, b);
        spectra.push_back(std::move(s));
        truth.push_back(r.label - 1);
    }
    auto pred = oracle::nearest_mean_predict(means, spectra);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        if (pred[i] == truth[i]) ++hits;
    double baseline = static_cast<double>(hits) / static_cast<double>(pred.size());
    if (baseline < 0.99)
        return report(7, "five mixers on the synthetic scene", false,
                      "scene too hard: nearest-mean baseline " + fmt(baseline) + " < 0.99");

    PatchSet tr{&cube, 5, split.train};
    PatchSet va{&cube, 5, split.val};
    PatchSet te{&cube, 5, split.test};
    TrainConfig cfg;
    cfg.epochs = 30;
    cfg.batch_size = 64;
    cfg.lr = 0.001;
    cfg.momentum = 0.9;
    cfg.weight_decay = 1e-4;
    cfg.alpha = 0.1;
    cfg.seed = 1;

    double lo = 1.0, hi = 0.0, worst_secs = 0;
    std::string oas;
    for (MixerKind kind : kAllKinds) {
        Timer timer;
        SpectralNet<float> model(scene_spec(kind), 1);
        train(model, tr, va, cfg);
        double oa = evaluate_metrics(model, te).oa;
        double secs = timer.seconds();
        worst_secs = std::max(worst_secs, secs);
        lo = std::min(lo, oa);
        hi = std::max(hi, oa);
        oas += std::string(oas.empty() ? "" : " ") + mixer_kind_name(kind) + "=" + fmt(oa);
        if (kind == MixerKind::Ssa) {
            out.ssa_model.emplace(std::move(model));
        }
        if (secs >= 600.0)
            return report(7, "five mixers on the synthetic scene", false,
                          std::string(mixer_kind_name(kind)) + " took " + fmt(secs) +
                              "s (budget 600s)");
    }
    out.cube = std::move(cube);
    out.gt = std::move(gt);
    out.split = std::move(split);
    out.spec = scene_spec(MixerKind::Ssa);

    bool ok = lo >= 0.95 && (hi - lo) <= 0.03;
    return report(7, "five mixers on the synthetic scene", ok,
                  oas + "; band " + fmt((hi - lo) * 100) + "pt (allowed 3), slowest " +
                      fmt(worst_secs) + "s/mixer (budget 600)");
}

// ---- criterion 8: diagnostics run to completion on trained weights ----

bool criterion8(TrainedScene& scene) {
    if (!scene.ssa_model)
        return report(8, "diagnostics end-to-end", false,
                      "no trained model available (criterion 7 failed before training)");
    SpectralNet<float>& model = *scene.ssa_model;
    model.set_training(false);

    // landscape on a 512-sample training subset
    std::vector<PatchRecord> recs = scene.split.train;
    Rng rng(2);
    rng.shuffle(recs);
    recs.resize(std::min<std::size_t>(512, recs.size()));
    PatchSet subset{&scene.cube, scene.spec.patch_size, std::move(recs)};
    DirectionPair<float> pair = make_directions(model.params(), 2);
    std::vector<float> theta = model.params().flatten_trainable();
    LandscapeGrid grid =
        landscape_grid(theta, pair, 11, model_loss_factory(model, subset, 0.1, 1e-4));
    bool grid_ok = grid.overflow_cells.empty() && grid.values[5][5] == 0.0;
    for (const auto& row : grid.values)
        for (double v : row) grid_ok = grid_ok && std::isfinite(v) && v <= 100.0;

    // 16 per-batch eigenvalue samples -> KDE curve that integrates to ~1
    std::size_t dim = model.params().trainable_scalar_count();
    std::vector<double> samples(16);
    bool hessian_ok = true;
    for (std::size_t b = 0; b < 16; ++b) {
        SpectralNet<float> net = model;
        std::vector<PatchRecord> batch_recs = scene.split.train;
        Rng pick(900 + b);
        pick.shuffle(batch_recs);
        batch_recs.resize(64);
        PatchSet data{&scene.cube, scene.spec.patch_size, std::move(batch_recs)};
        std::vector<std::size_t> which(64);
        for (std::size_t i = 0; i < 64; ++i) which[i] = i;
        Tensor<float> x = gather_batch(data, which);
        std::vector<std::size_t> labels(64);
        for (std::size_t i = 0; i < 64; ++i) labels[i] = data.records[i].label - 1;

        LossGradFn<float> loss_grad = [&](ParameterStore<float>& params,
                                          std::vector<float>* grad) -> float {
            (void)params;
            Tape<float> tape;
            if (!grad) tape.set_grad_enabled(false);
            Var<float> loss = label_smoothing_ce(net.forward(tape, x), labels, 0.0f);
            if (grad) {
                tape.backward(loss);
                *grad = net.trainable_grads();
            }
            return loss.value()[0];
        };
        HvpFn<float> hvp = [&](const std::vector<float>& v) {
            return hvp_estimate(net.params(), loss_grad, v);
        };
        Rng prng(1700 + b);
        EigenResult<float> res = top_hessian_eigenvalue(hvp, dim, prng);
        samples[b] = static_cast<double>(res.lambda_max);
        hessian_ok = hessian_ok && std::isfinite(samples[b]);
    }
    double integral = 0;
    if (hessian_ok) {
        EigenSampleSet dist = eigen_distribution(samples);
        integral = curve_integral(dist);
        hessian_ok = integral >= 0.95 && integral <= 1.0;
    }

    // 64-bit grids must not depend on the worker count
    auto wpath = scratch_dir("sml_acceptance_ssa.smlw");
    save_weights(wpath.string(), model.params());
    SpectralNet<double> dnet(scene.spec, 0);
    load_weights_into(dnet.params(), wpath.string());
    fs::remove(wpath);
    dnet.set_training(false);
    std::vector<PatchRecord> drecs = scene.split.train;
    Rng drng(3);
    drng.shuffle(drecs);
    drecs.resize(128);
    PatchSet dsub{&scene.cube, scene.spec.patch_size, std::move(drecs)};
    DirectionPair<double> dpair = make_directions(dnet.params(), 5);
    std::vector<double> dtheta = dnet.params().flatten_trainable();
    auto dfactory = model_loss_factory(dnet, dsub, 0.1, 1e-4);
    setenv("SML_THREADS", "1", 1);
    LandscapeGrid serial = landscape_grid(dtheta, dpair, 11, dfactory);
    setenv("SML_THREADS", "4", 1);
    LandscapeGrid parallel = landscape_grid(dtheta, dpair, 11, dfactory);
    unsetenv("SML_THREADS");
    bool same = true;
    for (std::size_t i = 0; i < 11; ++i)
        for (std::size_t j = 0; j < 11; ++j) same = same && serial.values[i][j] == parallel.values[i][j];

    bool ok = grid_ok && hessian_ok && same;
    return report(8, "diagnostics end-to-end", ok,
                  std::string("11x11 grid ") + (grid_ok ? "complete" : "BROKEN") +
                      ", kde integral " + fmt(integral) + " (want [0.95,1]), worker-count " +
                      (same ? "invariant" : "DEPENDENT"));
}

// ---- criterion 9: parameter accounting ----

bool criterion9() {
    ModelSpec micro = micro_spec(MixerKind::Ssa);
    SpectralNet<double> net(micro, 0);
    std::uint64_t micro_count = net.params().trainable_scalar_count();
    std::uint64_t micro_report = complexity_report(micro, 1).parameter_count;
    // hand count: embed 5*4+4, block [2*4 + 4*(4*4+4) + 2*4 + (8*4+8 + 4*8+4)], head 3*4+3
    const std::uint64_t micro_want = 24 + 172 + 15;

    ModelSpec big;
    big.mixer = MixerKind::Ssa;
    big.stage_depths = {3, 2, 4, 2};
    big.stage_channels = {96, 64, 32, 16};
    big.patch_size = 11;
    big.bands = 144;
    big.classes = 15;
    big.heads = 4;
    big.mlp_ratio = 4;
    std::uint64_t big_count = complexity_report(big, 64).parameter_count;
    const double reference = 470000.0;  // published figure for this configuration
    double dev = std::fabs(static_cast<double>(big_count) - reference) / reference;

    bool ok = micro_count == micro_want && micro_report == micro_want && dev <= 0.20;
    return report(9, "parameter accounting", ok,
                  "micro net " + std::to_string(micro_count) + " (want " +
                      std::to_string(micro_want) + "), reference net " + std::to_string(big_count) +
                      " vs 470000 (" + fmt(dev * 100) + "% off, allowed 20%)");
}

// ---- criterion 10: CLI reruns reproduce identical artifact hashes ----

int run_cmd(const std::string& bin, const std::string& args) {
    std::string cmd = bin + " " + args + " > /dev/null 2>&1";
    int rc = std::system(cmd.c_str());
    if (rc == -1) return -1;
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

// hash of every file under the run dirs except the manifests (their wall-clock
// field legitimately differs), plus the hash lists the manifests themselves
// recorded
struct RunDigest {
    std::map<std::string, std::string> files;
    std::vector<std::pair<std::string, std::string>> manifest_outputs;
};

RunDigest digest_tree(const fs::path& base) {
    RunDigest d;
    for (const auto& entry : fs::recursive_directory_iterator(base)) {
        if (!entry.is_regular_file()) continue;
        std::string rel = fs::relative(entry.path(), base).string();
        if (entry.path().filename() == "manifest.json") {
            std::ifstream is(entry.path());
            json m = json::parse(is);
            for (const auto& out : m["outputs"])
                d.manifest_outputs.emplace_back(out["path"].get<std::string>(),
                                                out["hash"].get<std::string>());
            continue;
        }
        d.files[rel] = git_blob_sha1(entry.path().string());
    }
    std::sort(d.manifest_outputs.begin(), d.manifest_outputs.end());
    return d;
}

bool criterion10(const std::string& bin) {
    if (bin.empty())
        return report(10, "rerun determinism", false, "no CLI binary path supplied in argv[1]");
    fs::path base = scratch_dir("sml_acceptance_rerun");

    auto run_all = [&]() -> std::optional<RunDigest> {
        fs::remove_all(base);
        fs::create_directories(base);
        std::string data = (base / "data").string();
        std::string run = (base / "run").string();
        std::vector<std::string> cmds = {
            "synth-data --classes 3 --bands 6 --size 16 --noise 0.02 --seed 5 --out " + data,
            "--verify train --cube " + data + "/cube.hsc --gt " + data +
                "/labels.hsg --mixer ssa --depths 1 --channels 4 --patch 3 --heads 2"
                " --mlp-ratio 2 --train-frac 0.2 --val-frac 0.1 --seeds 2 --seed 3 --epochs 2"
                " --batch 16 --lr 0.01 --out " + run,
            "--verify landscape --checkpoint " + run + "/seed3.smlw --grid 5 --subset 16"
                " --seed 2 --out " + (base / "ls").string(),
            "--verify hessian --checkpoint " + run + "/seed3.smlw --batches 3 --batch-size 8"
                " --seed 4 --out " + (base / "hs").string()};
        for (const auto& c : cmds)
            if (run_cmd(bin, c) != 0) return std::nullopt;
        return digest_tree(base);
    };

    auto first = run_all();
    if (!first) return report(10, "rerun determinism", false, "a CLI command failed on the first run");
    auto second = run_all();
    if (!second)
        return report(10, "rerun determinism", false, "a CLI command failed on the second run");
    fs::remove_all(base);

    bool files_same = first->files == second->files;
    bool manifests_same = first->manifest_outputs == second->manifest_outputs;
    bool ok = files_same && manifests_same && !first->files.empty();
    return report(10, "rerun determinism", ok,
                  std::to_string(first->files.size()) + " artifacts + " +
                      std::to_string(first->manifest_outputs.size()) + " recorded hashes " +
                      (ok ? "identical across reruns" : "DIFFER between reruns"));
}

}  // namespace

int main(int argc, char** argv) {
    std::string bin = argc > 1 ? argv[1] : "";
    bool ok = true;
    auto guard = [&](int n, const char* label, auto fn) {
        try {
            ok = fn() && ok;
        } catch (const std::exception& e) {
            ok = report(n, label, false, std::string("exception: ") + e.what()) && ok;
        }
    };
    TrainedScene scene;
    guard(1, "gradient vs finite differences", [] { return criterion1(); });
    guard(2, "top eigenvalue vs dense Hessian", [] { return criterion2(); });
    guard(3, "landscape grid fidelity", [] { return criterion3(); });
    guard(4, "loss sanity", [] { return criterion4(); });
    guard(5, "mixer shape and identity", [] { return criterion5(); });
    guard(6, "split counts vs reference table", [] { return criterion6(); });
    guard(7, "five mixers on the synthetic scene", [&] { return criterion7(scene); });
    guard(8, "diagnostics end-to-end", [&] { return criterion8(scene); });
    guard(9, "parameter accounting", [] { return criterion9(); });
    guard(10, "rerun determinism", [&] { return criterion10(bin); });
    return ok ? 0 : 1;
}
