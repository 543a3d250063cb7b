#pragma once

// The three learning-to-defer algorithms sharing one team-prediction
// contract: a deferral rule A and a classifier F over the completed
// dataset (real + artificial expert predictions).
//
//   surrogate          - joint (k+1)-class training, extra logit = defer
//   confidence_compare - separately trained classifier vs expert-correctness
//                        confidence, defer on strict inequality
//   nll_triage         - alternating per-instance NLL assignment, classifier
//                        retrained on its own assignments, test-time deferral
//                        predictor fit on the final assignment

#include <memory>

#include "deferkit/artificial.hpp"
#include "deferkit/embedding.hpp"
#include "deferkit/expertise.hpp"

namespace deferkit {

enum class DeferAlgorithm { surrogate, confidence_compare, nll_triage };

inline std::string to_string(DeferAlgorithm a) {
    switch (a) {
        case DeferAlgorithm::surrogate: return "surrogate";
        case DeferAlgorithm::confidence_compare: return "confidence-compare";
        case DeferAlgorithm::nll_triage: return "nll-triage";
    }
    return "?";
}

/// Mean surrogate loss over a batch: -log p_y - 1[h=y] log p_defer with p
/// the softmax over k+1 logits (deferral weight alpha fixed to 1).
inline double surrogate_loss(const Matrix& logits, const std::vector<int>& y,
                             const std::vector<int>& agree, Matrix* d_logits) {
    const auto n = logits.rows();
    if (n == 0 || std::size_t(n) != y.size() || y.size() != agree.size())
        throw PreconditionError("surrogate_loss: size mismatch");
    const int defer_idx = int(logits.cols()) - 1;
    Matrix p = softmax_rows(logits);
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        loss -= std::log(std::max(p(i, y[std::size_t(i)]), 1e-300));
        if (agree[std::size_t(i)]) loss -= std::log(std::max(p(i, defer_idx), 1e-300));
    }
    loss /= double(n);
    if (d_logits) {
        d_logits->resize(n, logits.cols());
        for (Eigen::Index i = 0; i < n; ++i) {
            double a = agree[std::size_t(i)] ? 1.0 : 0.0;
            d_logits->row(i) = (1.0 + a) * p.row(i);
            (*d_logits)(i, y[std::size_t(i)]) -= 1.0;
            (*d_logits)(i, defer_idx) -= a;
        }
        *d_logits /= double(n);
    }
    return loss;
}

struct TeamModel {
    DeferAlgorithm algo = DeferAlgorithm::surrogate;
    int k = 0;

    // surrogate / nll_triage classifier
    std::unique_ptr<Backbone> backbone;
    Linear head;  // k+1 outputs (surrogate) or k outputs (nll_triage)

    // confidence_compare components (shared with the rest of the pipeline)
    std::shared_ptr<const EmbeddingModel> classifier;
    std::shared_ptr<const ExpertiseModel> expertise;

    // nll_triage test-time deferral predictor
    std::unique_ptr<Backbone> defer_backbone;
    Linear defer_head;  // 2 outputs
};

struct TeamDecision {
    std::vector<int> defer;   // A(x): 1 = hand to the expert
    std::vector<int> f_pred;  // classifier argmax, 0-based
    Matrix f_dist;            // classifier distribution over k classes
};

inline TeamDecision team_decide(const TeamModel& team, const Matrix& x) {
    TeamDecision out;
    const auto n = x.rows();
    out.defer.assign(std::size_t(n), 0);
    switch (team.algo) {
        case DeferAlgorithm::surrogate: {
            Matrix logits = team.head.infer(team.backbone->infer(x));
            Matrix p = softmax_rows(logits);
            std::vector<int> full = argmax_rows(p);
            out.f_dist = p.leftCols(team.k);
            for (Eigen::Index i = 0; i < n; ++i) {
                out.f_dist.row(i) /= out.f_dist.row(i).sum();
                if (full[std::size_t(i)] == team.k) out.defer[std::size_t(i)] = 1;
            }
            out.f_pred = argmax_rows(out.f_dist);
            break;
        }
        case DeferAlgorithm::confidence_compare: {
            Classification cls = classify(*team.classifier, x);
            CorrectnessPrediction cp = predict_correctness(*team.expertise, x);
            out.f_dist = cls.distributions;
            out.f_pred = cls.classes;
            for (Eigen::Index i = 0; i < n; ++i) {
                double cls_conf = cls.distributions(i, cls.classes[std::size_t(i)]);
                // strict inequality: ties go to the classifier
                if (cp.p_correct[std::size_t(i)] > cls_conf) out.defer[std::size_t(i)] = 1;
            }
            break;
        }
        case DeferAlgorithm::nll_triage: {
            Matrix p = softmax_rows(team.head.infer(team.backbone->infer(x)));
            out.f_dist = p;
            out.f_pred = argmax_rows(p);
            Matrix dp = softmax_rows(team.defer_head.infer(team.defer_backbone->infer(x)));
            for (Eigen::Index i = 0; i < n; ++i)
                if (dp(i, 1) > 0.5) out.defer[std::size_t(i)] = 1;
            break;
        }
    }
    return out;
}

inline TeamDecision team_decide(const TeamModel& team, const Dataset& ds,
                                const std::vector<std::string>& ids) {
    return team_decide(team, payload_batch(ds, ids));
}

/// One row of the uniform prediction dump.
struct PredictionRow {
    std::string id;
    int y = -1;
    int h = -1;
    int deferred = 0;
    int f_pred = -1;
    int system_pred = -1;
};

/// System prediction: the expert's label when deferred, else the
/// classifier's argmax. The expert prediction h comes from the dataset
/// (real expert on the test split).
inline std::vector<PredictionRow> team_predict(const TeamModel& team, const Dataset& ds,
                                               const std::vector<std::string>& ids) {
    TeamDecision dec = team_decide(team, ds, ids);
    std::vector<PredictionRow> rows(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const Example& ex = ds.by_id(ids[i]);
        if (ex.h < 0) throw PreconditionError("team_predict: id " + ex.id +
                                              " has no expert prediction");
        rows[i].id = ex.id;
        rows[i].y = ex.y;
        rows[i].h = ex.h;
        rows[i].deferred = dec.defer[i];
        rows[i].f_pred = dec.f_pred[i];
        rows[i].system_pred = dec.defer[i] ? ex.h : dec.f_pred[i];
    }
    return rows;
}

namespace detail {

inline void require_expert_column(const Dataset& ds, const std::vector<std::string>& ids) {
    for (const auto& id : ids)
        if (ds.by_id(id).h < 0)
            throw PreconditionError("missing expert prediction for id " + id);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

inline TeamModel train_surrogate(const Dataset& ds, const std::vector<std::string>& train_ids,
                                 const BackboneConfig& bcfg, const TrainConfig& tcfg) {
    detail::require_expert_column(ds, train_ids);
    Rng rng = make_rng(tcfg.seed);
    TeamModel team;
    team.algo = DeferAlgorithm::surrogate;
    team.k = ds.k();
    team.backbone = make_backbone(ds, bcfg, rng);
    team.head = Linear(bcfg.feature_dim, ds.k() + 1, rng);

    Matrix x_all = payload_batch(ds, train_ids);
    std::vector<int> y_all = labels_of(ds, train_ids);
    std::vector<int> agree(train_ids.size());
    for (std::size_t i = 0; i < train_ids.size(); ++i) {
        const Example& ex = ds.by_id(train_ids[i]);
        agree[i] = ex.h == ex.y ? 1 : 0;
    }

    std::size_t step = 0;
    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
        auto order = shuffled_indices(train_ids.size(), rng);
        for (std::size_t off = 0; off < order.size(); off += std::size_t(tcfg.batch_size)) {
            std::size_t bs = std::min(std::size_t(tcfg.batch_size), order.size() - off);
            Matrix xb(Eigen::Index(bs), x_all.cols());
            std::vector<int> yb(bs), ab(bs);
            for (std::size_t i = 0; i < bs; ++i) {
                xb.row(Eigen::Index(i)) = x_all.row(Eigen::Index(order[off + i]));
                yb[i] = y_all[order[off + i]];
                ab[i] = agree[order[off + i]];
            }
            team.backbone->zero_grad();
            team.head.zero_grad();
            Matrix logits = team.head.forward(team.backbone->forward(xb));
            Matrix dl;
            double loss = surrogate_loss(logits, yb, ab, &dl);
            require_finite(loss, step, "surrogate loss");
            team.backbone->backward(team.head.backward(dl));
            team.head.step(tcfg.lr, tcfg.momentum, tcfg.nesterov);
            team.backbone->step(tcfg.lr, tcfg.momentum, tcfg.nesterov);
            ++step;
        }
    }
    return team;
}

/// No joint training: wraps the classifier and the expertise model.
inline TeamModel train_confidence_compare(std::shared_ptr<const EmbeddingModel> classifier,
                                          std::shared_ptr<const ExpertiseModel> expertise) {
    if (!classifier || !expertise)
        throw PreconditionError("confidence_compare: untrained components");
    TeamModel team;
    team.algo = DeferAlgorithm::confidence_compare;
    team.k = classifier->k;
    team.classifier = std::move(classifier);
    team.expertise = std::move(expertise);
    return team;
}

struct TriageConfig {
    int rounds = 3;
    TrainConfig classifier;       // per-round classifier training
    TrainConfig defer_predictor;  // test-time deferral predictor fit
};

inline TeamModel train_nll_triage(const Dataset& ds, const std::vector<std::string>& train_ids,
                                  const BackboneConfig& bcfg, const TriageConfig& cfg,
                                  std::vector<double>* round_losses = nullptr) {
    if (cfg.rounds < 1) throw PreconditionError("nll_triage: rounds must be >= 1");
    detail::require_expert_column(ds, train_ids);
    Rng rng = make_rng(cfg.classifier.seed);

    TeamModel team;
    team.algo = DeferAlgorithm::nll_triage;
    team.k = ds.k();
    team.backbone = make_backbone(ds, bcfg, rng);
    // zero head: the untrained classifier is exactly uniform (NLL = ln k)
    team.head = Linear(bcfg.feature_dim, ds.k(), rng);
    team.head.W.setZero();
    team.head.b.setZero();

    Matrix x_all = payload_batch(ds, train_ids);
    std::vector<int> y_all = labels_of(ds, train_ids);

    // Per-instance expert NLL, fixed across rounds. Real rows use their
    // observed 0/1 correctness as the label likelihood. Artificial rows
    // weight the drawn prediction by the correctness confidence recorded
    // at completion time: likelihood c for a drawn-correct row, uniform
    // wrong-class mass (1-c)/(k-1) otherwise.
    std::vector<double> expert_nll(train_ids.size());
    for (std::size_t i = 0; i < train_ids.size(); ++i) {
        const Example& ex = ds.by_id(train_ids[i]);
        double lik;
        if (ex.h_source == "artificial" && ex.confidence >= 0.0) {
            double c = ex.h_bin_hat == 1 ? ex.confidence : 1.0 - ex.confidence;
            lik = ex.h == ex.y ? c : (1.0 - c) / double(ds.k() - 1);
        } else {
            lik = ex.h == ex.y ? 1.0 : 0.0;
        }
        expert_nll[i] = -std::log(std::max(lik, 1e-300));
    }

    // Alternating rounds: fit the classifier on its current instances (all
    // of them initially, so the comparison starts from a trained F rather
    // than the uniform zero head), then reassign by per-instance NLL.
    std::vector<int> assigned_to_expert(train_ids.size(), 0);
    std::size_t step = 0;
    for (int round = 0; round < cfg.rounds; ++round) {
        std::vector<std::size_t> mine;
        for (std::size_t i = 0; i < train_ids.size(); ++i)
            if (!assigned_to_expert[i]) mine.push_back(i);
        if (mine.empty()) break;  // everything deferred; nothing to fit
        double last_epoch_loss = 0.0;
        for (int epoch = 0; epoch < cfg.classifier.epochs; ++epoch) {
            auto order = shuffled_indices(mine.size(), rng);
            double epoch_loss = 0.0;
            std::size_t seen = 0;
            for (std::size_t off = 0; off < order.size();
                 off += std::size_t(cfg.classifier.batch_size)) {
                std::size_t bs = std::min(std::size_t(cfg.classifier.batch_size),
                                          order.size() - off);
                Matrix xb(Eigen::Index(bs), x_all.cols());
                std::vector<int> yb(bs);
                for (std::size_t i = 0; i < bs; ++i) {
                    xb.row(Eigen::Index(i)) = x_all.row(Eigen::Index(mine[order[off + i]]));
                    yb[i] = y_all[mine[order[off + i]]];
                }
                team.backbone->zero_grad();
                team.head.zero_grad();
                Matrix logits = team.head.forward(team.backbone->forward(xb));
                Matrix dl;
                double loss = ce_loss(logits, yb, &dl);
                require_finite(loss, step, "triage classifier loss");
                team.backbone->backward(team.head.backward(dl));
                team.head.step(cfg.classifier.lr, cfg.classifier.momentum, cfg.classifier.nesterov);
                team.backbone->step(cfg.classifier.lr, cfg.classifier.momentum,
                                    cfg.classifier.nesterov);
                epoch_loss += loss * double(bs);
                seen += bs;
                ++step;
            }
            last_epoch_loss = epoch_loss / double(seen);
        }
        if (round_losses) round_losses->push_back(last_epoch_loss);
        // reassignment by per-instance NLL comparison
        Matrix p = softmax_rows(team.head.infer(team.backbone->infer(x_all)));
        for (std::size_t i = 0; i < train_ids.size(); ++i) {
            double cls_nll = -std::log(std::max(p(Eigen::Index(i), y_all[i]), 1e-300));
            assigned_to_expert[i] = expert_nll[i] < cls_nll ? 1 : 0;
        }
    }

    // Test-time deferral predictor fit on the final train-time assignment.
    team.defer_backbone = make_backbone(ds, bcfg, rng);
    team.defer_head = Linear(bcfg.feature_dim, 2, rng);
    const TrainConfig& dcfg = cfg.defer_predictor;
    for (int epoch = 0; epoch < dcfg.epochs; ++epoch) {
        auto order = shuffled_indices(train_ids.size(), rng);
        for (std::size_t off = 0; off < order.size(); off += std::size_t(dcfg.batch_size)) {
            std::size_t bs = std::min(std::size_t(dcfg.batch_size), order.size() - off);
            Matrix xb(Eigen::Index(bs), x_all.cols());
            std::vector<int> yb(bs);
            for (std::size_t i = 0; i < bs; ++i) {
                xb.row(Eigen::Index(i)) = x_all.row(Eigen::Index(order[off + i]));
                yb[i] = assigned_to_expert[order[off + i]];
            }
            team.defer_backbone->zero_grad();
            team.defer_head.zero_grad();
            Matrix logits = team.defer_head.forward(team.defer_backbone->forward(xb));
            Matrix dl;
            double loss = ce_loss(logits, yb, &dl);
            require_finite(loss, step, "deferral predictor loss");
            team.defer_backbone->backward(team.defer_head.backward(dl));
            team.defer_head.step(dcfg.lr, dcfg.momentum, dcfg.nesterov);
            team.defer_backbone->step(dcfg.lr, dcfg.momentum, dcfg.nesterov);
            ++step;
        }
    }
    return team;
}

// ---------------------------------------------------------------------------
// Prediction dump I/O: (id, y, h, deferred, F_pred, system_pred), classes
// 1-based on disk.
// ---------------------------------------------------------------------------

inline void save_prediction_dump(const std::vector<PredictionRow>& rows, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw ParseError("cannot write prediction dump: " + path);
    f << "id\ty\th\tdeferred\tf_pred\tsystem_pred\n";
    for (const auto& r : rows)
        f << r.id << "\t" << r.y + 1 << "\t" << r.h + 1 << "\t" << r.deferred << "\t"
          << r.f_pred + 1 << "\t" << r.system_pred + 1 << "\n";
}

inline std::vector<PredictionRow> load_prediction_dump(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open prediction dump: " + path);
    std::vector<PredictionRow> rows;
    std::string line;
    bool first = true;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        if (first) {
            first = false;
            continue;
        }
        auto fields = detail::split_fields(line, '\t');
        if (fields.size() != 6) throw ParseError("prediction dump: bad row '" + line + "'");
        PredictionRow r;
        r.id = fields[0];
        r.y = std::stoi(fields[1]) - 1;
        r.h = std::stoi(fields[2]) - 1;
        r.deferred = std::stoi(fields[3]);
        r.f_pred = std::stoi(fields[4]) - 1;
        r.system_pred = std::stoi(fields[5]) - 1;
        rows.push_back(r);
    }
    return rows;
}

}  // namespace deferkit
