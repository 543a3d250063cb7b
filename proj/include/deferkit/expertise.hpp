#pragma once

// Expertise predictor: learns whether the expert is correct on an instance.
// Covers the binarization of expert predictions, semi-supervised training
// with confidence-thresholded pseudo-labels (with or without the graph
// contrastive term and memory-smoothed soft labels), and the supervised
// single-layer / max-margin baselines on frozen embedding features.

#include <deque>
#include <memory>

#include "deferkit/augment.hpp"
#include "deferkit/batch.hpp"
#include "deferkit/embedding.hpp"

namespace deferkit {

/// 1 iff the expert's class matches the ground truth. 0-based classes.
inline int binarize(int h, int y, int k) {
    if (h < 0 || h >= k || y < 0 || y >= k)
        throw PreconditionError("binarize: class index out of range");
    return h == y ? 1 : 0;
}

struct SSLConfig {
    double tau = 0.95;       // pseudo-label confidence threshold, in (0,1]
    double lambda_u = 1.0;   // unlabeled loss weight
    double lambda_c = 1.0;   // graph contrastive loss weight
    int mu = 7;              // unlabeled-to-labeled batch ratio
    int epochs = 50;
    double lr = 0.03;
    double momentum = 0.9;
    bool nesterov = true;
    int batch_size = 8;      // labeled batch size
    std::uint64_t seed = 0;
    // soft pseudo-labels + memory smoothing (graph variant only); turning
    // this off makes the objective coincide with the hard-label variant
    bool soft_pseudo_labels = true;
    int memory_size = 640;
    double smoothing = 0.9;        // weight kept on the model's own q
    int proj_dim = 16;
    int proj_hidden = 32;
    double graph_threshold = 0.8;  // pseudo-label graph sparsification
    double temperature = 0.1;

    void validate() const {
        if (!(tau > 0.0 && tau <= 1.0)) throw PreconditionError("tau must be in (0,1]");
        if (lambda_u < 0.0 || lambda_c < 0.0)
            throw PreconditionError("loss weights must be nonnegative");
        if (mu < 1) throw PreconditionError("mu must be >= 1");
    }
};

enum class SupervisedVariant { single_layer_softmax, max_margin_linear };

struct ExpertiseModel {
    const EmbeddingModel* embedding = nullptr;     // frozen, not owned; null for raw variant
    std::unique_ptr<Backbone> own_backbone;        // trainable; raw-SSL baseline only
    Linear head;                                   // d x 2 (softmax) or d x 1 (max-margin)
    bool max_margin = false;
    bool degenerate = false;                       // constant predictor (single-class L)
    int constant_class = 1;
    Mlp projection;                                // graph variant only

    Matrix features(const Matrix& x) const {
        if (embedding) return embedding->extract(x);
        if (own_backbone) return own_backbone->infer(x);
        throw PreconditionError("expertise model has no feature extractor");
    }

    /// Per-instance (p_incorrect, p_correct), rows summing to 1.
    Matrix distributions(const Matrix& x) const {
        Matrix f = features(x);
        Matrix out(f.rows(), 2);
        if (degenerate) {
            for (Eigen::Index i = 0; i < f.rows(); ++i) {
                out(i, constant_class) = 1.0;
                out(i, 1 - constant_class) = 0.0;
            }
            return out;
        }
        if (max_margin) {
            Matrix score = head.infer(f);
            for (Eigen::Index i = 0; i < f.rows(); ++i) {
                double p1 = 1.0 / (1.0 + std::exp(-score(i, 0)));
                out(i, 0) = 1.0 - p1;
                out(i, 1) = p1;
            }
            return out;
        }
        return softmax_rows(head.infer(f));
    }

    void save(std::ostream& os) const {
        os << "deferkit-expertise v1\n";
        os << (embedding ? 1 : 0) << " " << (max_margin ? 1 : 0) << " " << (degenerate ? 1 : 0)
           << " " << constant_class << "\n";
        if (own_backbone) {
            os << "own\n";
            own_backbone->save(os);
        } else {
            os << "frozen\n";
        }
        detail::write_linear(os, head);
    }
    static ExpertiseModel load(std::istream& is, const EmbeddingModel* embedding) {
        std::string tag, ver;
        is >> tag >> ver;
        if (tag != "deferkit-expertise") throw ParseError("not an expertise checkpoint");
        ExpertiseModel m;
        int uses_emb, mm, deg;
        is >> uses_emb >> mm >> deg >> m.constant_class;
        m.max_margin = mm != 0;
        m.degenerate = deg != 0;
        std::string which;
        is >> which;
        if (which == "own") m.own_backbone = load_backbone(is);
        if (uses_emb) {
            if (!embedding) throw PreconditionError("checkpoint requires an embedding model");
            m.embedding = embedding;
        }
        m.head = detail::read_linear(is);
        return m;
    }
};

struct CorrectnessPrediction {
    std::vector<int> h_bin_hat;        // 0/1; tie at 0.5 resolves to 0
    std::vector<double> confidence;    // probability of the predicted class
    std::vector<double> p_correct;     // probability the expert is correct
};

inline CorrectnessPrediction predict_correctness(const ExpertiseModel& model, const Matrix& x) {
    Matrix dist = model.distributions(x);
    CorrectnessPrediction out;
    out.h_bin_hat.resize(std::size_t(dist.rows()));
    out.confidence.resize(std::size_t(dist.rows()));
    out.p_correct.resize(std::size_t(dist.rows()));
    for (Eigen::Index i = 0; i < dist.rows(); ++i) {
        double p1 = dist(i, 1);
        int pred = p1 > 0.5 ? 1 : 0;
        out.h_bin_hat[std::size_t(i)] = pred;
        out.confidence[std::size_t(i)] = pred == 1 ? p1 : 1.0 - p1;
        out.p_correct[std::size_t(i)] = p1;
    }
    return out;
}

inline CorrectnessPrediction predict_correctness(const ExpertiseModel& model, const Dataset& ds,
                                                 const std::vector<std::string>& ids) {
    return predict_correctness(model, payload_batch(ds, ids));
}

inline std::vector<int> binary_expert_labels(const Dataset& ds,
                                             const std::vector<std::string>& l_ids) {
    std::vector<int> out;
    out.reserve(l_ids.size());
    for (const auto& id : l_ids) {
        const Example& ex = ds.by_id(id);
        if (ex.h < 0) throw PreconditionError("id " + id + " has no expert prediction");
        out.push_back(binarize(ex.h, ex.y, ds.k()));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Supervised baselines on frozen features.
// ---------------------------------------------------------------------------

struct SupervisedConfig {
    int epochs = 200;
    double lr = 0.05;
    double momentum = 0.9;
    bool nesterov = true;
    int batch_size = 32;
    double svm_reg = 1e-3;
    std::uint64_t seed = 0;
};

inline ExpertiseModel train_supervised_head(const Dataset& ds,
                                            const std::vector<std::string>& l_ids,
                                            const EmbeddingModel& embedding,
                                            SupervisedVariant variant,
                                            const SupervisedConfig& cfg) {
    if (l_ids.empty()) throw PreconditionError("train_supervised_head: empty labeled set");
    std::vector<int> hb = binary_expert_labels(ds, l_ids);
    Matrix feats = extract_features(embedding, ds, l_ids);
    Rng rng = make_rng(cfg.seed);

    ExpertiseModel model;
    model.embedding = &embedding;
    model.max_margin = variant == SupervisedVariant::max_margin_linear;

    bool all_same = std::all_of(hb.begin(), hb.end(), [&](int v) { return v == hb[0]; });
    if (all_same) {
        model.degenerate = true;
        model.constant_class = hb[0];
        model.head = Linear(int(feats.cols()), model.max_margin ? 1 : 2, rng);
        std::cerr << "[deferkit] warning: single-class labeled set, returning constant "
                  << "expertise predictor (class " << hb[0] << ")\n";
        return model;
    }

    if (variant == SupervisedVariant::single_layer_softmax) {
        model.head = Linear(int(feats.cols()), 2, rng);
        std::size_t step = 0;
        for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
            auto order = shuffled_indices(l_ids.size(), rng);
            for (std::size_t off = 0; off < order.size(); off += std::size_t(cfg.batch_size)) {
                std::size_t bs = std::min(std::size_t(cfg.batch_size), order.size() - off);
                Matrix xb(Eigen::Index(bs), feats.cols());
                std::vector<int> yb(bs);
                for (std::size_t i = 0; i < bs; ++i) {
                    xb.row(Eigen::Index(i)) = feats.row(Eigen::Index(order[off + i]));
                    yb[i] = hb[order[off + i]];
                }
                model.head.zero_grad();
                Matrix logits = model.head.forward(xb);
                Matrix dl;
                double loss = ce_loss(logits, yb, &dl);
                require_finite(loss, step, "supervised head loss");
                model.head.backward(dl);
                model.head.step(cfg.lr, cfg.momentum, cfg.nesterov);
                ++step;
            }
        }
        return model;
    }

    // Max-margin linear: hinge loss with L2 penalty by subgradient descent.
    model.head = Linear(int(feats.cols()), 1, rng);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto order = shuffled_indices(l_ids.size(), rng);
        for (std::size_t off = 0; off < order.size(); off += std::size_t(cfg.batch_size)) {
            std::size_t bs = std::min(std::size_t(cfg.batch_size), order.size() - off);
            Matrix xb(Eigen::Index(bs), feats.cols());
            Vector sign(static_cast<Eigen::Index>(bs));
            for (std::size_t i = 0; i < bs; ++i) {
                xb.row(Eigen::Index(i)) = feats.row(Eigen::Index(order[off + i]));
                sign[Eigen::Index(i)] = hb[order[off + i]] == 1 ? 1.0 : -1.0;
            }
            model.head.zero_grad();
            Matrix score = model.head.forward(xb);
            Matrix d_score = Matrix::Zero(Eigen::Index(bs), 1);
            for (Eigen::Index i = 0; i < Eigen::Index(bs); ++i)
                if (sign[i] * score(i, 0) < 1.0) d_score(i, 0) = -sign[i] / double(bs);
            model.head.backward(d_score);
            model.head.gW += cfg.svm_reg * model.head.W;
            model.head.step(cfg.lr, cfg.momentum, cfg.nesterov);
        }
    }
    return model;
}

// ---------------------------------------------------------------------------
// Semi-supervised training.
// ---------------------------------------------------------------------------

/// Ring buffer of recent (pseudo-probability, projected embedding) pairs
/// used for memory-smoothed pseudo-labels.
struct MemoryBank {
    std::size_t capacity = 640;
    std::deque<std::pair<Eigen::RowVector2d, Eigen::RowVectorXd>> entries;

    void push(const Eigen::RowVector2d& q, const Eigen::RowVectorXd& z) {
        entries.emplace_back(q, z);
        while (entries.size() > capacity) entries.pop_front();
    }
};

struct SslBatchTerms {
    double ls = 0.0;
    double lu = 0.0;
    double lc = 0.0;
    double total = 0.0;
    double mask_rate = 0.0;
};

struct EpochMetrics {
    double ls = 0.0, lu = 0.0, lc = 0.0, mask_rate = 0.0;
};

namespace detail {

inline Matrix l2_normalize_rows(const Matrix& v, Matrix* norms = nullptr) {
    Matrix z = v;
    if (norms) norms->resize(v.rows(), 1);
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
        double n = std::max(v.row(i).norm(), 1e-12);
        z.row(i) /= n;
        if (norms) (*norms)(i, 0) = n;
    }
    return z;
}

}  // namespace detail

/// One forward (and optional backward) pass over a labeled + unlabeled
/// batch. `graph_variant` enables soft/memory-smoothed pseudo-labels and
/// the graph contrastive term; with soft_pseudo_labels=false and
/// lambda_c=0 the objective coincides with the hard-pseudo-label variant
/// on identical batches. Augmentations consume `rng` in a fixed order
/// (weak labeled, weak unlabeled, strong unlabeled) in every variant.
inline SslBatchTerms ssl_batch_pass(ExpertiseModel& model, const Dataset& ds,
                                    const std::vector<std::string>& batch_l,
                                    const std::vector<int>& hb,
                                    const std::vector<std::string>& batch_u,
                                    const AugmentationPolicy& policy, const SSLConfig& cfg,
                                    bool graph_variant, MemoryBank* bank, Rng& rng,
                                    bool with_grad) {
    const std::size_t nl = batch_l.size();
    const std::size_t nu = batch_u.size();
    SslBatchTerms terms;

    Matrix x_weak_l = augmented_batch(ds, batch_l, policy, false, rng);
    Matrix x_weak_u, x_strong_u;
    if (nu > 0) {
        x_weak_u = augmented_batch(ds, batch_u, policy, false, rng);
        x_strong_u = augmented_batch(ds, batch_u, policy, true, rng);
    }

    const bool trainable_backbone = model.own_backbone != nullptr;

    // Pseudo-labels come from the weakly augmented unlabeled pass, no grad.
    Matrix q;
    Matrix z_weak_u;  // projected weak embeddings, for smoothing / bank
    if (nu > 0) {
        Matrix f_weak_u = model.features(x_weak_u);
        q = softmax_rows(model.head.infer(f_weak_u));
        if (graph_variant && cfg.soft_pseudo_labels)
            z_weak_u = detail::l2_normalize_rows(model.projection.infer(f_weak_u));
    }

    // Smoothed (or raw) pseudo-label distribution per unlabeled instance.
    Matrix q_target = q;
    if (nu > 0 && graph_variant && cfg.soft_pseudo_labels && bank && !bank->entries.empty()) {
        for (Eigen::Index i = 0; i < q.rows(); ++i) {
            Vector logits(Eigen::Index(bank->entries.size()));
            for (std::size_t b = 0; b < bank->entries.size(); ++b)
                logits[Eigen::Index(b)] =
                    z_weak_u.row(i).dot(bank->entries[b].second) / cfg.temperature;
            double m = logits.maxCoeff();
            Vector a = (logits.array() - m).exp();
            a /= a.sum();
            Eigen::RowVector2d agg = Eigen::RowVector2d::Zero();
            for (std::size_t b = 0; b < bank->entries.size(); ++b)
                agg += a[Eigen::Index(b)] * bank->entries[b].first;
            q_target.row(i) = cfg.smoothing * q.row(i) + (1.0 - cfg.smoothing) * agg;
        }
    }

    // Hard targets + mask (hard variant), or soft targets + mask on the
    // smoothed distribution (graph variant with soft labels).
    Matrix targets = Matrix::Zero(Eigen::Index(nu), 2);
    std::vector<double> w_u(nu, 0.0);
    std::size_t masked_in = 0;
    for (std::size_t j = 0; j < nu; ++j) {
        Eigen::Index i = Eigen::Index(j);
        double conf = q_target.row(i).maxCoeff();
        bool keep = conf >= cfg.tau;
        if (keep) {
            ++masked_in;
            w_u[j] = 1.0 / double(nu);
        }
        if (graph_variant && cfg.soft_pseudo_labels) {
            targets.row(i) = q_target.row(i);
        } else {
            targets(i, q_target(i, 0) >= q_target(i, 1) ? 0 : 1) = 1.0;
        }
    }
    terms.mask_rate = nu > 0 ? double(masked_in) / double(nu) : 0.0;

    // Gradient-bearing pass: one combined forward so cached activations
    // stay valid for the single backward.
    Matrix x_grad(Eigen::Index(nl + nu), Eigen::Index(x_weak_l.cols()));
    x_grad.topRows(Eigen::Index(nl)) = x_weak_l;
    if (nu > 0) x_grad.bottomRows(Eigen::Index(nu)) = x_strong_u;

    Matrix feats;
    if (trainable_backbone)
        feats = with_grad ? model.own_backbone->forward(x_grad) : model.own_backbone->infer(x_grad);
    else
        feats = model.embedding->extract(x_grad);
    Matrix logits = with_grad ? model.head.forward(feats) : model.head.infer(feats);

    std::vector<int> hb_batch(hb.begin(), hb.end());
    Matrix d_logits_l;
    terms.ls = ce_loss(logits.topRows(Eigen::Index(nl)), hb_batch, with_grad ? &d_logits_l : nullptr);

    Matrix d_logits_u;
    if (nu > 0) {
        terms.lu = ce_soft_weighted(logits.bottomRows(Eigen::Index(nu)), targets, w_u,
                                    with_grad ? &d_logits_u : nullptr);
    }

    // Graph contrastive term over strong-augmentation projections.
    Matrix d_feats_graph;
    if (nu > 0 && graph_variant && cfg.lambda_c > 0.0) {
        Matrix f_strong = feats.bottomRows(Eigen::Index(nu));
        Matrix v = with_grad ? model.projection.forward(f_strong) : model.projection.infer(f_strong);
        Matrix norms;
        Matrix z = detail::l2_normalize_rows(v, &norms);
        // pseudo-label graph: thresholded pairwise target agreement, unit diagonal
        Matrix wq = Matrix::Zero(Eigen::Index(nu), Eigen::Index(nu));
        for (Eigen::Index i = 0; i < Eigen::Index(nu); ++i) {
            wq(i, i) = 1.0;
            for (Eigen::Index j = 0; j < Eigen::Index(nu); ++j) {
                if (i == j) continue;
                double s = q_target.row(i).dot(q_target.row(j));
                if (s >= cfg.graph_threshold) wq(i, j) = s;
            }
            wq.row(i) /= wq.row(i).sum();
        }
        // embedding graph: row softmax of scaled projection similarities
        Matrix sim = (z * z.transpose()) / cfg.temperature;
        Matrix wz = softmax_rows(sim);
        double lc = 0.0;
        for (Eigen::Index i = 0; i < Eigen::Index(nu); ++i)
            for (Eigen::Index j = 0; j < Eigen::Index(nu); ++j)
                if (wq(i, j) > 0.0) lc -= wq(i, j) * std::log(std::max(wz(i, j), 1e-300));
        terms.lc = lc / double(nu);

        if (with_grad) {
            Matrix g = (wz - wq) / double(nu);  // d lc / d sim
            Matrix dz = (g + g.transpose()) * z / cfg.temperature;
            // through row-wise L2 normalization
            Matrix dv(dz.rows(), dz.cols());
            for (Eigen::Index i = 0; i < dz.rows(); ++i) {
                double n = norms(i, 0);
                dv.row(i) = (dz.row(i) - z.row(i) * z.row(i).dot(dz.row(i))) / n;
            }
            if (cfg.lambda_c != 1.0) dv *= cfg.lambda_c;
            model.projection.zero_grad();
            d_feats_graph = model.projection.backward(dv);
        }
    }

    terms.total = terms.ls + cfg.lambda_u * terms.lu + cfg.lambda_c * terms.lc;

    if (with_grad) {
        Matrix d_logits = Matrix::Zero(logits.rows(), logits.cols());
        d_logits.topRows(Eigen::Index(nl)) = d_logits_l;
        if (nu > 0 && cfg.lambda_u > 0.0)
            d_logits.bottomRows(Eigen::Index(nu)) += cfg.lambda_u * d_logits_u;
        Matrix d_feats = model.head.backward(d_logits);
        if (d_feats_graph.size() > 0) d_feats.bottomRows(Eigen::Index(nu)) += d_feats_graph;
        if (trainable_backbone) model.own_backbone->backward(d_feats);
    }

    // Bank update uses the weak-augmentation view.
    if (nu > 0 && graph_variant && cfg.soft_pseudo_labels && bank && with_grad) {
        for (Eigen::Index i = 0; i < Eigen::Index(nu); ++i)
            bank->push(Eigen::RowVector2d(q_target(i, 0), q_target(i, 1)), z_weak_u.row(i));
    }
    return terms;
}

/// Shared SSL training loop. Pass embedding=nullptr to train the raw
/// (non-embedding) baseline end to end on payloads.
inline ExpertiseModel train_ssl(const Dataset& ds, const std::vector<std::string>& l_ids,
                                const std::vector<std::string>& u_ids,
                                const EmbeddingModel* embedding, const BackboneConfig& bcfg,
                                const AugmentationPolicy& policy, const SSLConfig& cfg,
                                bool graph_variant, std::vector<EpochMetrics>* metrics = nullptr) {
    cfg.validate();
    if (l_ids.empty()) throw PreconditionError("train_ssl: empty labeled set");
    std::vector<int> hb_all = binary_expert_labels(ds, l_ids);
    Rng rng = make_rng(cfg.seed);

    ExpertiseModel model;
    int feat_dim;
    if (embedding) {
        model.embedding = embedding;
        feat_dim = embedding->feature_dim();
    } else {
        model.own_backbone = make_backbone(ds, bcfg, rng);
        feat_dim = model.own_backbone->out_dim();
    }
    model.head = Linear(feat_dim, 2, rng);
    if (graph_variant) model.projection = Mlp(feat_dim, {cfg.proj_hidden}, cfg.proj_dim, rng);

    MemoryBank bank;
    bank.capacity = std::size_t(cfg.memory_size);

    std::size_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto order_l = shuffled_indices(l_ids.size(), rng);
        auto order_u = u_ids.empty() ? std::vector<std::size_t>{} : shuffled_indices(u_ids.size(), rng);
        std::size_t u_cursor = 0;
        EpochMetrics em;
        std::size_t batches = 0;
        for (std::size_t off = 0; off < order_l.size(); off += std::size_t(cfg.batch_size)) {
            std::size_t bs = std::min(std::size_t(cfg.batch_size), order_l.size() - off);
            std::vector<std::string> batch_l(bs);
            std::vector<int> hb(bs);
            for (std::size_t i = 0; i < bs; ++i) {
                batch_l[i] = l_ids[order_l[off + i]];
                hb[i] = hb_all[order_l[off + i]];
            }
            std::vector<std::string> batch_u;
            if (!u_ids.empty()) {
                std::size_t want = bs * std::size_t(cfg.mu);
                for (std::size_t i = 0; i < want; ++i) {
                    if (u_cursor >= order_u.size()) {
                        order_u = shuffled_indices(u_ids.size(), rng);
                        u_cursor = 0;
                    }
                    batch_u.push_back(u_ids[order_u[u_cursor++]]);
                }
            }
            model.head.zero_grad();
            if (model.own_backbone) model.own_backbone->zero_grad();
            SslBatchTerms t = ssl_batch_pass(model, ds, batch_l, hb, batch_u, policy, cfg,
                                             graph_variant, &bank, rng, true);
            require_finite(t.total, step, "ssl loss");
            model.head.step(cfg.lr, cfg.momentum, cfg.nesterov);
            if (model.own_backbone) model.own_backbone->step(cfg.lr, cfg.momentum, cfg.nesterov);
            if (graph_variant && cfg.lambda_c > 0.0 && !batch_u.empty())
                model.projection.step(cfg.lr, cfg.momentum, cfg.nesterov);
            em.ls += t.ls;
            em.lu += t.lu;
            em.lc += t.lc;
            em.mask_rate += t.mask_rate;
            ++batches;
            ++step;
        }
        if (metrics && batches > 0) {
            em.ls /= double(batches);
            em.lu /= double(batches);
            em.lc /= double(batches);
            em.mask_rate /= double(batches);
            metrics->push_back(em);
        }
    }
    return model;
}

inline ExpertiseModel train_fixmatch(const Dataset& ds, const std::vector<std::string>& l_ids,
                                     const std::vector<std::string>& u_ids,
                                     const EmbeddingModel* embedding, const BackboneConfig& bcfg,
                                     const AugmentationPolicy& policy, const SSLConfig& cfg,
                                     std::vector<EpochMetrics>* metrics = nullptr) {
    return train_ssl(ds, l_ids, u_ids, embedding, bcfg, policy, cfg, false, metrics);
}

inline ExpertiseModel train_comatch(const Dataset& ds, const std::vector<std::string>& l_ids,
                                    const std::vector<std::string>& u_ids,
                                    const EmbeddingModel* embedding, const BackboneConfig& bcfg,
                                    const AugmentationPolicy& policy, const SSLConfig& cfg,
                                    std::vector<EpochMetrics>* metrics = nullptr) {
    return train_ssl(ds, l_ids, u_ids, embedding, bcfg, policy, cfg, true, metrics);
}

}  // namespace deferkit
