#include "pimqat/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pimqat::train {

void TrainConfig::validate() const {
    require(epochs >= 0, "train: epochs must be >= 0");
    require(batch_size >= 1, "train: batch_size must be >= 1");
    require(lr0 > 0.0, "train: lr0 must be > 0");
    require(momentum >= 0.0 && momentum < 1.0, "train: momentum must lie in [0, 1)");
    require(weight_decay >= 0.0, "train: weight_decay must be >= 0");
    for (std::size_t i = 1; i < lr_milestones.size(); ++i)
        require(lr_milestones[i] > lr_milestones[i - 1], "train: lr_milestones must be strictly increasing");
}

double lr_at(const TrainConfig& cfg, int epoch) {
    double lr = cfg.lr0;
    for (int m : cfg.lr_milestones)
        if (epoch >= m) lr *= cfg.lr_decay;
    return lr;
}

void Sgd::step(std::vector<nn::ParamRef>& params, double lr) {
    if (velocity.size() != params.size()) {
        velocity.clear();
        for (const auto& p : params) velocity.emplace_back(p.value->size(), 0.0);
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& w = *params[i].value;
        const auto& g = *params[i].grad;
        auto& v = velocity[i];
        require(g.size() == w.size(), "sgd: gradient of " + params[i].name + " has the wrong size");
        for (std::size_t k = 0; k < w.size(); ++k) {
            const double gk = g[k] + weight_decay * w[k];
            v[k] = momentum * v[k] + gk;
            w[k] -= lr * (gk + momentum * v[k]);
        }
    }
}

namespace {

bool finite_all(const std::vector<nn::ParamRef>& params) {
    for (const auto& p : params)
        for (double v : *p.value)
            if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace

TrainReport train(nn::Model& model, const TrainConfig& cfg, const data::Dataset& train_set,
                  const data::Dataset* test_set) {
    cfg.validate();
    TrainReport report;
    if (cfg.epochs == 0) return report;
    require(train_set.size() > 0, "train: empty training set");

    Sgd opt{cfg.momentum, cfg.weight_decay, {}};
    Rng order_rng(derive_seed(cfg.seed, 0x6f72646572));
    Rng aug_rng(derive_seed(cfg.seed, 0x617567));
    std::vector<std::size_t> idx(train_set.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::uint64_t tick = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        EpochMetrics em;
        em.epoch = epoch;
        em.lr = lr_at(cfg, epoch);
        order_rng.shuffle(idx.begin(), idx.end());
        double loss_sum = 0.0;
        std::size_t correct_sum = 0;
        try {
            for (std::size_t begin = 0; begin < idx.size(); begin += cfg.batch_size) {
                const std::size_t end = std::min(idx.size(), begin + cfg.batch_size);
                // A batch of one gives BN zero variance; drop such a tail.
                if (end - begin < 2 && begin > 0) break;
                auto batch = data::make_batch(train_set, idx, begin, end, cfg.augment, &aug_rng);
                nn::ForwardContext ctx;
                ctx.bn = nn::BnMode::train;
                ctx.keep_cache = true;
                ctx.tick = tick++;
                model.zero_grad();
                const Tensor logits = model.forward(batch.x, ctx);
                Tensor grad;
                std::size_t correct = 0;
                const double loss = nn::softmax_cross_entropy(logits, batch.y, grad, correct);
                if (!std::isfinite(loss)) throw nn::NumericalError(model.layers.size(), "(loss)");
                model.backward(grad);
                auto params = model.parameters();
                opt.step(params, em.lr);
                if (!finite_all(params)) throw Error("non-finite parameters after update");
                loss_sum += loss * static_cast<double>(end - begin);
                correct_sum += correct;
            }
        } catch (const Error& e) {
            report.diverged = true;
            report.diverged_epoch = epoch;
            report.error = e.what();
            return report;
        }
        em.train_loss = loss_sum / static_cast<double>(idx.size());
        em.train_acc = static_cast<double>(correct_sum) / static_cast<double>(idx.size());
        if (test_set && (cfg.eval_each_epoch || epoch + 1 == cfg.epochs)) {
            try {
                em.test_acc = evaluate(model, *test_set);
            } catch (const Error& e) {
                report.diverged = true;
                report.diverged_epoch = epoch;
                report.error = e.what();
                report.epochs.push_back(em);
                return report;
            }
        }
        report.epochs.push_back(em);
    }
    if (!report.epochs.empty()) report.final_test_acc = report.epochs.back().test_acc;
    return report;
}

std::vector<int> predict(nn::Model& model, const data::Dataset& d, const EvalOptions& opt) {
    std::vector<std::size_t> idx(d.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::vector<int> out;
    out.reserve(d.size());
    std::uint64_t tick = opt.tick_base;
    for (std::size_t begin = 0; begin < idx.size(); begin += opt.batch_size) {
        const std::size_t end = std::min(idx.size(), begin + opt.batch_size);
        auto batch = data::make_batch(d, idx, begin, end, false, nullptr);
        nn::ForwardContext ctx;
        ctx.bn = nn::BnMode::running;
        ctx.iface = opt.iface;
        ctx.tick = tick++;
        const auto pred = nn::argmax_rows(model.forward(batch.x, ctx));
        out.insert(out.end(), pred.begin(), pred.end());
    }
    return out;
}

double evaluate(nn::Model& model, const data::Dataset& d, const EvalOptions& opt) {
    require(d.size() > 0, "evaluate: empty dataset");
    const auto pred = predict(model, d, opt);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == d.labels[i];
    return static_cast<double>(correct) / static_cast<double>(d.size());
}

void bn_calibrate(nn::Model& model, const data::Dataset& d, const CalibSpec& spec, const nn::EvalInterface* iface) {
    require(d.size() >= 2, "bn_calibrate: calibration data is empty");
    require(spec.num_batches >= 1 && spec.batch_size >= 2, "bn_calibrate: need >= 1 batch of >= 2 samples");
    for (auto& L : model.layers) {
        L.bn.calib_mean.clear();
        L.bn.calib_var.clear();
        L.bn.calib_batches = 0;
    }
    std::vector<std::size_t> idx(d.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(derive_seed(spec.seed, 0x63616c6962));
    rng.shuffle(idx.begin(), idx.end());
    const std::size_t bs = std::min(spec.batch_size, d.size());
    std::size_t pos = 0;
    for (std::size_t b = 0; b < spec.num_batches; ++b) {
        if (pos + bs > idx.size()) {
            rng.shuffle(idx.begin(), idx.end());
            pos = 0;
        }
        auto batch = data::make_batch(d, idx, pos, pos + bs, false, nullptr);
        pos += bs;
        nn::ForwardContext ctx;
        ctx.bn = nn::BnMode::calibrate;
        ctx.iface = iface;
        ctx.tick = spec.tick_base + b;
        model.forward(batch.x, ctx);
    }
    for (auto& L : model.layers) {
        if (!L.has_bn || L.bn.calib_batches == 0) continue;
        const double n = static_cast<double>(L.bn.calib_batches);
        for (std::size_t c = 0; c < L.bn.channels(); ++c) {
            L.bn.running_mean[c] = L.bn.calib_mean[c] / n;
            L.bn.running_var[c] = L.bn.calib_var[c] / n;
        }
        L.bn.calib_mean.clear();
        L.bn.calib_var.clear();
        L.bn.calib_batches = 0;
    }
}

SearchResult adjusted_precision_search(const ModelFactory& factory, const TrainConfig& cfg,
                                       const data::Dataset& train_set, const data::Dataset& test_set,
                                       const nn::EvalInterface& iface, const std::vector<int>& candidates,
                                       const CalibSpec& calib) {
    require(!candidates.empty(), "adjusted_precision_search: no candidates");
    if (iface.b_imc && !iface.b_imc->is_infinite())
        for (int b : candidates)
            require(b <= iface.b_imc->bits(), "adjusted_precision_search: candidate b_train " + std::to_string(b) +
                                                  " exceeds b_infer " + iface.b_imc->str());
    SearchResult out;
    std::optional<double> best;
    for (int b : candidates) {
        SearchRow row;
        row.b_train = b;
        try {
            nn::Model m = factory(Resolution(b));
            const auto rep = train(m, cfg, train_set, nullptr);
            if (rep.diverged) throw Error("training diverged in epoch " + std::to_string(rep.diverged_epoch) + ": " +
                                          rep.error);
            bn_calibrate(m, train_set, calib, &iface);
            row.accuracy = evaluate(m, test_set, {256, &iface, 0});
        } catch (const Error& e) {
            row.failed = true;
            row.error = e.what();
        }
        if (!row.failed && (!best || row.accuracy > *best || (row.accuracy == *best && b > out.best_b_train))) {
            best = row.accuracy;
            out.best_b_train = b;
        }
        out.rows.push_back(std::move(row));
    }
    return out;
}

}  // namespace pimqat::train
