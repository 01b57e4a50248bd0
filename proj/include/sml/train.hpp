#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sml/errors.hpp"
#include "sml/hsi.hpp"
#include "sml/model.hpp"
#include "sml/ops.hpp"
#include "sml/parallel.hpp"
#include "sml/params.hpp"
#include "sml/rng.hpp"

namespace sml {

struct TrainConfig {
    std::size_t epochs = 300;
    std::size_t batch_size = 64;
    double lr = 0.001;
    double momentum = 0.9;
    double weight_decay = 0.0001;
    double alpha = 0.1;  // label smoothing
    std::uint64_t seed = 0;
    bool best_val = false;  // keep the max-val-OA epoch instead of the final one

    void validate() const {
        if (epochs < 1) throw ArgumentError("train config: epochs must be >= 1");
        if (batch_size < 1) throw ArgumentError("train config: batch size must be >= 1");
        if (lr <= 0) throw ArgumentError("train config: lr must be positive");
        if (momentum < 0 || momentum >= 1) throw ArgumentError("train config: momentum must be in [0,1)");
        if (weight_decay < 0) throw ArgumentError("train config: weight decay must be non-negative");
        if (alpha < 0 || alpha >= 1) throw ArgumentError("train config: alpha must be in [0,1)");
    }
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0;
    double val_oa = 0;
};

struct Metrics {
    std::vector<std::vector<std::size_t>> confusion;  // [true][pred], 0-based
    double oa = 0;
    double aa = 0;
    double kappa = 0;
    std::vector<double> per_class;  // recall; NaN for classes absent from the test set
};

// Mean over the batch of -sum_c((1-alpha) y_c + alpha/C) log softmax(logits)_c.
// With alpha=0 the weights are exactly one-hot, so this is plain CE bit for bit.
template <typename T>
Var<T> label_smoothing_ce(Var<T> logits, const std::vector<std::size_t>& labels, T alpha) {
    if (logits.shape().size() != 2) throw ArgumentError("loss: logits must be (B, C)");
    std::size_t B = logits.shape()[0], C = logits.shape()[1];
    if (C < 2) throw ArgumentError("loss: need at least 2 classes");
    if (labels.size() != B) throw ArgumentError("loss: label count does not match batch");
    Tensor<T> w(Shape{B, C}, alpha / static_cast<T>(C));
    for (std::size_t b = 0; b < B; ++b) {
        if (labels[b] >= C) throw ArgumentError("loss: label " + std::to_string(labels[b]) + " out of range");
        w.at(b, labels[b]) += T(1) - alpha;
    }
    Var<T> logp = ops::log_softmax_lastdim(logits);
    Var<T> weighted = ops::mul(logp, logits.tape()->constant(std::move(w)));
    return ops::scale(ops::sum_all(weighted), -T(1) / static_cast<T>(B));
}

// Coupled weight decay: g' = g + wd*theta; v <- momentum*v + g'; theta <- theta - lr*v.
template <typename T>
void sgd_step(ParameterStore<T>& params, const std::vector<T>& grads, std::vector<T>& velocity,
              T lr, T momentum, T weight_decay) {
    std::vector<T> theta = params.flatten_trainable();
    if (grads.size() != theta.size()) throw ArgumentError("sgd: gradient length mismatch");
    if (velocity.empty()) velocity.assign(theta.size(), T(0));
    if (velocity.size() != theta.size()) throw ArgumentError("sgd: velocity length mismatch");
    for (std::size_t i = 0; i < theta.size(); ++i) {
        T g = grads[i] + weight_decay * theta[i];
        velocity[i] = momentum * velocity[i] + g;
        theta[i] -= lr * velocity[i];
    }
    params.assign_trainable(theta);
}

template <typename T>
Metrics evaluate_metrics(SpectralNet<T>& model, const PatchSet& test, std::size_t eval_batch = 256) {
    if (test.records.empty()) throw ArgumentError("evaluate: empty test set");
    std::size_t C = model.spec().classes;
    std::size_t n = test.records.size();
    std::size_t chunks = (n + eval_batch - 1) / eval_batch;
    std::vector<std::vector<std::size_t>> preds(chunks);

    parallel_for(chunks, [&](std::size_t ci) {
        SpectralNet<T> local = model;  // read-only copy per worker task
        local.set_training(false);
        std::size_t lo = ci * eval_batch;
        std::size_t hi = std::min(n, lo + eval_batch);
        std::vector<std::size_t> which(hi - lo);
        for (std::size_t i = lo; i < hi; ++i) which[i - lo] = i;
        Tensor<T> batch = gather_batch(test, which).template cast<T>();
        Tensor<T> logits = local.logits(batch);
        std::vector<std::size_t> p(hi - lo);
        for (std::size_t b = 0; b < hi - lo; ++b) {
            std::size_t arg = 0;
            for (std::size_t c = 1; c < C; ++c)
                if (logits.at(b, c) > logits.at(b, arg)) arg = c;
            p[b] = arg;
        }
        preds[ci] = std::move(p);
    });

    Metrics m;
    m.confusion.assign(C, std::vector<std::size_t>(C, 0));
    for (std::size_t ci = 0; ci < chunks; ++ci) {
        std::size_t lo = ci * eval_batch;
        for (std::size_t k = 0; k < preds[ci].size(); ++k) {
            std::size_t truth = test.records[lo + k].label - 1;
            m.confusion[truth][preds[ci][k]]++;
        }
    }

    std::size_t total = n, diag = 0;
    std::vector<std::size_t> row(C, 0), col(C, 0);
    for (std::size_t i = 0; i < C; ++i)
        for (std::size_t j = 0; j < C; ++j) {
            row[i] += m.confusion[i][j];
            col[j] += m.confusion[i][j];
            if (i == j) diag += m.confusion[i][j];
        }
    m.oa = static_cast<double>(diag) / static_cast<double>(total);
    m.per_class.assign(C, std::numeric_limits<double>::quiet_NaN());
    double recall_sum = 0;
    std::size_t present = 0;
    for (std::size_t i = 0; i < C; ++i) {
        if (row[i] == 0) {
            std::cerr << "warning: class " << (i + 1) << " absent from test set; skipped in AA\n";
            continue;
        }
        m.per_class[i] = static_cast<double>(m.confusion[i][i]) / static_cast<double>(row[i]);
        recall_sum += m.per_class[i];
        ++present;
    }
    m.aa = present ? recall_sum / static_cast<double>(present) : 0.0;
    double po = m.oa;
    double pe = 0;
    for (std::size_t i = 0; i < C; ++i)
        pe += static_cast<double>(row[i]) * static_cast<double>(col[i]) /
              (static_cast<double>(total) * static_cast<double>(total));
    m.kappa = (pe >= 1.0) ? (po >= 1.0 ? 1.0 : 0.0) : (po - pe) / (1.0 - pe);
    return m;
}

// One full training run. Mutates the model in place; returns the history.
// The weights left in the model are the final epoch's (the reported "best"),
// unless cfg.best_val asks for the max-val-OA epoch.
template <typename T>
std::vector<EpochRecord> train(SpectralNet<T>& model, const PatchSet& train_set,
                               const PatchSet& val_set, const TrainConfig& cfg) {
    cfg.validate();
    if (train_set.records.empty()) throw ArgumentError("train: empty training set");
    Rng shuffle_rng(cfg.seed);  // data order only; init seed is the model's
    std::vector<T> velocity;
    std::vector<EpochRecord> history;
    std::vector<std::size_t> order(train_set.records.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    double best_oa = -1;
    ParameterStore<T> best_params;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        model.set_training(true);
        double loss_sum = 0;
        for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch_size) {
            std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
            std::vector<std::size_t> which(order.begin() + lo, order.begin() + hi);
            Tensor<T> batch = gather_batch(train_set, which).template cast<T>();
            std::vector<std::size_t> labels(hi - lo);
            for (std::size_t k = 0; k < which.size(); ++k)
                labels[k] = train_set.records[which[k]].label - 1;
            Tape<T> tape;
            Var<T> logits = model.forward(tape, batch);
            Var<T> loss = label_smoothing_ce(logits, labels, static_cast<T>(cfg.alpha));
            double lv = static_cast<double>(loss.value()[0]);
            if (!std::isfinite(lv))
                throw NumericError("loss is not finite at epoch " + std::to_string(epoch) +
                                   ", batch " + std::to_string(lo / cfg.batch_size));
            tape.backward(loss);
            sgd_step(model.params(), model.trainable_grads(), velocity, static_cast<T>(cfg.lr),
                     static_cast<T>(cfg.momentum), static_cast<T>(cfg.weight_decay));
            loss_sum += lv * static_cast<double>(hi - lo);
        }
        EpochRecord rec;
        rec.epoch = epoch + 1;
        rec.train_loss = loss_sum / static_cast<double>(order.size());
        rec.val_oa = std::numeric_limits<double>::quiet_NaN();
        if (!val_set.records.empty()) {
            model.set_training(false);
            rec.val_oa = evaluate_metrics(model, val_set).oa;
            if (cfg.best_val && rec.val_oa > best_oa) {
                best_oa = rec.val_oa;
                best_params = model.params();
            }
        }
        history.push_back(rec);
    }
    model.set_training(false);
    if (cfg.best_val && best_oa >= 0) model.params() = best_params;
    return history;
}

inline void write_history_csv(const std::string& path, const std::vector<EpochRecord>& history) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot open for writing: " + path);
    os << "epoch,train_loss,val_oa\n";
    os.precision(10);
    for (const auto& r : history) os << r.epoch << "," << r.train_loss << "," << r.val_oa << "\n";
    if (!os) throw DataError("write failed: " + path);
}

inline nlohmann::json metrics_to_json(const Metrics& m, std::uint64_t seed) {
    nlohmann::json per = nlohmann::json::array();
    for (double v : m.per_class) {
        if (std::isnan(v))
            per.push_back(nullptr);
        else
            per.push_back(v);
    }
    return nlohmann::json{{"oa", m.oa},       {"aa", m.aa},           {"kappa", m.kappa},
                          {"per_class", per}, {"confusion", m.confusion}, {"seed", seed}};
}

}  // namespace sml
