#pragma once

// Minimal dense neural-network toolkit: linear layers, ReLU MLPs,
// softmax cross-entropy, and SGD with Nesterov momentum. Batches are
// row-major: one instance per row.

#include <cmath>
#include <string>
#include <vector>

#include "deferkit/common.hpp"

namespace deferkit {

struct ParamView {
    double* data;
    std::size_t size;
};

inline double xavier_scale(int fan_in, int fan_out) {
    return std::sqrt(6.0 / double(fan_in + fan_out));
}

struct Linear {
    Matrix W;  // in x out
    Vector b;
    Matrix gW;
    Vector gb;
    Matrix vW;
    Vector vb;
    Matrix cache_in;

    Linear() = default;
    Linear(int in, int out, Rng& rng) {
        W.resize(in, out);
        double s = xavier_scale(in, out);
        std::uniform_real_distribution<double> d(-s, s);
        for (int i = 0; i < in; ++i)
            for (int j = 0; j < out; ++j) W(i, j) = d(rng);
        b = Vector::Zero(out);
        gW = Matrix::Zero(in, out);
        gb = Vector::Zero(out);
        vW = Matrix::Zero(in, out);
        vb = Vector::Zero(out);
    }

    int in_dim() const { return int(W.rows()); }
    int out_dim() const { return int(W.cols()); }

    Matrix forward(const Matrix& x) {
        cache_in = x;
        return (x * W).rowwise() + b.transpose();
    }

    Matrix infer(const Matrix& x) const { return (x * W).rowwise() + b.transpose(); }

    // Accumulates gradients; returns gradient w.r.t. the input.
    Matrix backward(const Matrix& d_out) {
        gW += cache_in.transpose() * d_out;
        gb += d_out.colwise().sum().transpose();
        return d_out * W.transpose();
    }

    void zero_grad() {
        gW.setZero();
        gb.setZero();
    }

    void step(double lr, double momentum, bool nesterov) {
        vW = momentum * vW + gW;
        vb = momentum * vb + gb;
        if (nesterov) {
            W -= lr * (gW + momentum * vW);
            b -= lr * (gb + momentum * vb);
        } else {
            W -= lr * vW;
            b -= lr * vb;
        }
    }

    void params(std::vector<ParamView>& out) {
        out.push_back({W.data(), std::size_t(W.size())});
        out.push_back({b.data(), std::size_t(b.size())});
    }
    void grads(std::vector<ParamView>& out) {
        out.push_back({gW.data(), std::size_t(gW.size())});
        out.push_back({gb.data(), std::size_t(gb.size())});
    }
};

/// ReLU MLP: Linear -> ReLU -> ... -> Linear (no activation after last).
/// hidden = {} gives a single linear map.
struct Mlp {
    std::vector<Linear> layers;
    std::vector<Matrix> cache_pre;  // pre-activations per hidden layer

    Mlp() = default;
    Mlp(int in, const std::vector<int>& hidden, int out, Rng& rng) {
        int prev = in;
        for (int h : hidden) {
            layers.emplace_back(prev, h, rng);
            prev = h;
        }
        layers.emplace_back(prev, out, rng);
    }

    int in_dim() const { return layers.front().in_dim(); }
    int out_dim() const { return layers.back().out_dim(); }

    Matrix forward(const Matrix& x) {
        cache_pre.clear();
        Matrix a = x;
        for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
            Matrix pre = layers[i].forward(a);
            cache_pre.push_back(pre);
            a = pre.cwiseMax(0.0);
        }
        return layers.back().forward(a);
    }

    Matrix infer(const Matrix& x) const {
        Matrix a = x;
        for (std::size_t i = 0; i + 1 < layers.size(); ++i)
            a = layers[i].infer(a).cwiseMax(0.0);
        return layers.back().infer(a);
    }

    Matrix backward(const Matrix& d_out) {
        Matrix d = layers.back().backward(d_out);
        for (std::size_t i = layers.size() - 1; i-- > 0;) {
            d = d.cwiseProduct((cache_pre[i].array() > 0.0).cast<double>().matrix());
            d = layers[i].backward(d);
        }
        return d;
    }

    void zero_grad() {
        for (auto& l : layers) l.zero_grad();
    }
    void step(double lr, double momentum, bool nesterov) {
        for (auto& l : layers) l.step(lr, momentum, nesterov);
    }
    void params(std::vector<ParamView>& out) {
        for (auto& l : layers) l.params(out);
    }
    void grads(std::vector<ParamView>& out) {
        for (auto& l : layers) l.grads(out);
    }
};

/// Row-wise softmax, numerically stabilized.
inline Matrix softmax_rows(const Matrix& logits) {
    Matrix p = logits;
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
        double m = p.row(i).maxCoeff();
        p.row(i) = (p.row(i).array() - m).exp();
        p.row(i) /= p.row(i).sum();
    }
    return p;
}

/// Mean cross-entropy of integer labels vs row softmax of logits.
/// d_logits receives (softmax - onehot) / n.
inline double ce_loss(const Matrix& logits, const std::vector<int>& labels, Matrix* d_logits) {
    const auto n = logits.rows();
    if (n == 0 || std::size_t(n) != labels.size())
        throw PreconditionError("ce_loss: label/logit count mismatch");
    Matrix p = softmax_rows(logits);
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
        loss -= std::log(std::max(p(i, labels[std::size_t(i)]), 1e-300));
    loss /= double(n);
    if (d_logits) {
        *d_logits = p / double(n);
        for (Eigen::Index i = 0; i < n; ++i) (*d_logits)(i, labels[std::size_t(i)]) -= 1.0 / double(n);
    }
    return loss;
}

/// Weighted soft-target cross-entropy: sum_i w_i * H(target_i, softmax(logit_i)).
/// d_logits receives w_i * (softmax_i - target_i).
inline double ce_soft_weighted(const Matrix& logits, const Matrix& targets,
                               const std::vector<double>& w, Matrix* d_logits) {
    if (logits.rows() != targets.rows() || std::size_t(logits.rows()) != w.size())
        throw PreconditionError("ce_soft_weighted: shape mismatch");
    Matrix p = softmax_rows(logits);
    double loss = 0.0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        if (w[std::size_t(i)] == 0.0) continue;
        double hi = 0.0;
        for (Eigen::Index j = 0; j < logits.cols(); ++j)
            if (targets(i, j) > 0.0) hi -= targets(i, j) * std::log(std::max(p(i, j), 1e-300));
        loss += w[std::size_t(i)] * hi;
    }
    if (d_logits) {
        *d_logits = p - targets;
        for (Eigen::Index i = 0; i < logits.rows(); ++i) d_logits->row(i) *= w[std::size_t(i)];
    }
    return loss;
}

inline void require_finite(double v, std::size_t step, const char* what) {
    if (!std::isfinite(v))
        throw DivergenceError(std::string(what) + " non-finite at step " + std::to_string(step));
}

}  // namespace deferkit
