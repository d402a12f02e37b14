#pragma once

// AdamW with decoupled weight decay, plus early-stopping logic.

#include "tavit/nn.hpp"

namespace tavit {

struct AdamWHyper {
    double lr = 2e-4;
    double beta1 = 0.500;
    double beta2 = 0.999;
    double eps = 1e-6;
    double weight_decay = 1e-2;
};

template <typename S>
class AdamW {
public:
    AdamW() = default;
    AdamW(std::vector<std::pair<std::string, Tensor<S>>> params, AdamWHyper hyper)
        : params_(std::move(params)), hyper_(hyper) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i].second->data.size(), S(0));
            v_[i].assign(params_[i].second->data.size(), S(0));
        }
    }

    void zero_grad() {
        for (auto& [name, p] : params_) p->zero_grad();
    }

    // m <- b1 m + (1-b1) g ; v <- b2 v + (1-b2) g^2 ; bias-corrected step plus
    // decoupled decay theta <- theta - lr*lambda*theta.
    void step() {
        ++t_;
        const S b1 = S(hyper_.beta1), b2 = S(hyper_.beta2);
        const S bc1 = S(1) - S(std::pow(hyper_.beta1, double(t_)));
        const S bc2 = S(1) - S(std::pow(hyper_.beta2, double(t_)));
        const S lr = S(hyper_.lr), eps = S(hyper_.eps), wd = S(hyper_.weight_decay);
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i].second;
            const S* g = p->grad.data();
            S* th = p->data.data();
            S* m = m_[i].data();
            S* v = v_[i].data();
            const int64_t n = p->numel();
            for (int64_t j = 0; j < n; ++j) {
                m[j] = b1 * m[j] + (S(1) - b1) * g[j];
                v[j] = b2 * v[j] + (S(1) - b2) * g[j] * g[j];
                const S mhat = m[j] / bc1;
                const S vhat = v[j] / bc2;
                th[j] -= lr * (mhat / (std::sqrt(vhat) + eps)) + lr * wd * th[j];
            }
        }
    }

    uint64_t step_count() const { return t_; }
    const AdamWHyper& hyper() const { return hyper_; }
    std::vector<std::vector<S>>& moment1() { return m_; }
    std::vector<std::vector<S>>& moment2() { return v_; }
    void set_step_count(uint64_t t) { t_ = t; }
    const std::vector<std::pair<std::string, Tensor<S>>>& params() const { return params_; }

private:
    std::vector<std::pair<std::string, Tensor<S>>> params_;
    std::vector<std::vector<S>> m_, v_;
    AdamWHyper hyper_;
    uint64_t t_ = 0;
};

struct EpochLoss {
    int64_t epoch = 0;
    double train_l1 = 0;
    double val_l1 = 0;
};

// True iff the best validation loss occurred more than `patience` epochs ago.
inline bool early_stop(const std::vector<EpochLoss>& history, int64_t patience) {
    if (history.empty()) throw ContractError("early_stop: empty history");
    size_t best = 0;
    for (size_t i = 1; i < history.size(); ++i)
        if (history[i].val_l1 < history[best].val_l1) best = i;
    return int64_t(history.size() - 1 - best) > patience;
}

}  // namespace tavit
