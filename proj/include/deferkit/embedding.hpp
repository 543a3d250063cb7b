#pragma once

// Embedding model: backbone feature extractor trained jointly with a
// k-class softmax head on ground-truth labels. Supplies frozen features
// for the expertise predictor and the Classifier Alone boundary.

#include <memory>

#include "deferkit/backbone.hpp"
#include "deferkit/batch.hpp"

namespace deferkit {

struct TrainConfig {
    int epochs = 60;
    double lr = 0.1;
    double momentum = 0.9;
    bool nesterov = true;
    int batch_size = 64;
    std::uint64_t seed = 0;
};

struct EmbeddingModel {
    std::unique_ptr<Backbone> backbone;
    Linear head;  // d x k
    int k = 0;
    std::vector<double> loss_trajectory;

    int feature_dim() const { return backbone->out_dim(); }

    Matrix extract(const Matrix& x) const {
        if (x.cols() != backbone->in_dim()) throw InputError("extract: payload shape mismatch");
        return backbone->infer(x);
    }

    Matrix class_distributions(const Matrix& x) const {
        return softmax_rows(head.infer(extract(x)));
    }

    void save(std::ostream& os) const {
        os << "deferkit-embedding v1\n" << k << "\n";
        backbone->save(os);
        detail::write_linear(os, head);
        os << loss_trajectory.size() << "\n";
        os.precision(17);
        for (double v : loss_trajectory) os << v << "\n";
    }
    static EmbeddingModel load(std::istream& is) {
        std::string tag, ver;
        is >> tag >> ver;
        if (tag != "deferkit-embedding") throw ParseError("not an embedding checkpoint");
        EmbeddingModel m;
        is >> m.k;
        m.backbone = load_backbone(is);
        m.head = detail::read_linear(is);
        std::size_t nt = 0;
        if (is >> nt) {
            m.loss_trajectory.resize(nt);
            for (auto& v : m.loss_trajectory) is >> v;
        }
        return m;
    }
};

/// Joint backbone + head training with mean cross-entropy over all of D.
inline EmbeddingModel train_embedding(const Dataset& ds, const std::vector<std::string>& ids,
                                      const BackboneConfig& bcfg, const TrainConfig& tcfg) {
    if (ids.empty()) throw PreconditionError("train_embedding: empty training set");
    Rng rng = make_rng(tcfg.seed);
    EmbeddingModel model;
    model.k = ds.k();
    model.backbone = make_backbone(ds, bcfg, rng);
    model.head = Linear(bcfg.feature_dim, ds.k(), rng);

    Matrix x_all = payload_batch(ds, ids);
    std::vector<int> y_all = labels_of(ds, ids);

    std::size_t step = 0;
    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
        auto order = shuffled_indices(ids.size(), rng);
        double epoch_loss = 0.0;
        std::size_t seen = 0;
        for (std::size_t off = 0; off < order.size(); off += std::size_t(tcfg.batch_size)) {
            std::size_t bs = std::min(std::size_t(tcfg.batch_size), order.size() - off);
            Matrix xb(Eigen::Index(bs), x_all.cols());
            std::vector<int> yb(bs);
            for (std::size_t i = 0; i < bs; ++i) {
                xb.row(Eigen::Index(i)) = x_all.row(Eigen::Index(order[off + i]));
                yb[i] = y_all[order[off + i]];
            }
            model.backbone->zero_grad();
            model.head.zero_grad();
            Matrix feats = model.backbone->forward(xb);
            Matrix logits = model.head.forward(feats);
            Matrix d_logits;
            double loss = ce_loss(logits, yb, &d_logits);
            require_finite(loss, step, "embedding loss");
            Matrix d_feats = model.head.backward(d_logits);
            model.backbone->backward(d_feats);
            model.head.step(tcfg.lr, tcfg.momentum, tcfg.nesterov);
            model.backbone->step(tcfg.lr, tcfg.momentum, tcfg.nesterov);
            epoch_loss += loss * double(bs);
            seen += bs;
            ++step;
        }
        model.loss_trajectory.push_back(epoch_loss / double(seen));
    }
    return model;
}

inline EmbeddingModel train_embedding(const Dataset& ds, const BackboneConfig& bcfg,
                                      const TrainConfig& tcfg) {
    return train_embedding(ds, all_ids(ds), bcfg, tcfg);
}

struct Classification {
    std::vector<int> classes;  // 0-based; argmax, ties to the lowest index
    Matrix distributions;      // one row per instance, sums to 1
};

inline Classification classify(const EmbeddingModel& model, const Matrix& x) {
    Classification out;
    out.distributions = model.class_distributions(x);
    out.classes = argmax_rows(out.distributions);
    return out;
}

inline Classification classify(const EmbeddingModel& model, const Dataset& ds,
                               const std::vector<std::string>& ids) {
    return classify(model, payload_batch(ds, ids));
}

inline Matrix extract_features(const EmbeddingModel& model, const Dataset& ds,
                               const std::vector<std::string>& ids) {
    return model.extract(payload_batch(ds, ids));
}

}  // namespace deferkit
