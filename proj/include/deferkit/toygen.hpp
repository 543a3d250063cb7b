#pragma once

// Desk-scale synthetic task generator: a coarse classification problem
// with a fine subclass taxonomy, mirroring the superclass/subclass setup
// used for synthetic-expert experiments. Latent subclass clusters are
// mixed into a higher-dimensional payload with distractor dimensions, so
// a label-trained embedding recovers structure a raw few-shot model
// cannot. Optionally emits tiny image payloads instead of vectors.

#include <iomanip>

#include <Eigen/QR>

#include "deferkit/dataset.hpp"

namespace deferkit {

struct ToyConfig {
    int k = 10;
    int subclasses_per_class = 5;
    int n_train = 3000;
    int n_test = 1000;
    int latent_dim = 8;
    int payload_dim = 40;
    double super_radius = 3.0;
    double sub_radius = 1.4;
    double noise = 1.0;
    double distractor_sigma = 2.0;
    // the first hard_per_class subclasses of every class get inflated noise,
    // concentrating classifier errors on a known subset of the taxonomy
    int hard_per_class = 0;
    double hard_noise_mult = 3.0;
    bool with_meta = false;   // gender / age / patient_id metadata
    bool images = false;      // 8x8x1 image payloads instead of vectors
    int img_side = 8;
    std::uint64_t seed = 0;

    int k_sub() const { return k * subclasses_per_class; }
};

struct ToyData {
    Dataset dataset;
    std::vector<std::string> train_ids;
    std::vector<std::string> test_ids;
};

namespace detail {

inline Matrix random_rotation(int dim, Rng& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Matrix a(dim, dim);
    for (int i = 0; i < dim; ++i)
        for (int j = 0; j < dim; ++j) a(i, j) = n(rng);
    Eigen::HouseholderQR<Matrix> qr(a);
    return qr.householderQ();
}

}  // namespace detail

inline ToyData make_toy_dataset(const ToyConfig& cfg) {
    if (cfg.k < 2 || cfg.subclasses_per_class < 1)
        throw PreconditionError("make_toy_dataset: need k >= 2 and >= 1 subclass per class");
    Rng rng = make_rng(cfg.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const int k_sub = cfg.k_sub();

    TaxonomyMap taxonomy;
    taxonomy.k = cfg.k;
    taxonomy.sub_to_super.resize(std::size_t(k_sub));
    for (int s = 0; s < k_sub; ++s)
        taxonomy.sub_to_super[std::size_t(s)] = s / cfg.subclasses_per_class;

    // latent geometry
    std::vector<Vector> super_center(static_cast<std::size_t>(cfg.k));
    for (auto& c : super_center) {
        c = Vector(cfg.latent_dim);
        for (int d = 0; d < cfg.latent_dim; ++d) c[d] = cfg.super_radius * gauss(rng);
    }
    std::vector<Vector> sub_center(static_cast<std::size_t>(k_sub));
    for (int s = 0; s < k_sub; ++s) {
        sub_center[std::size_t(s)] = super_center[std::size_t(taxonomy.sub_to_super[std::size_t(s)])];
        for (int d = 0; d < cfg.latent_dim; ++d)
            sub_center[std::size_t(s)][d] += cfg.sub_radius * gauss(rng);
    }

    // image templates (one per subclass) when image payloads are requested
    const int img_dim = cfg.img_side * cfg.img_side;
    std::vector<Vector> templates;
    if (cfg.images) {
        std::uniform_real_distribution<double> u(0.0, 1.0);
        templates.resize(std::size_t(k_sub));
        for (auto& t : templates) {
            t = Vector(img_dim);
            for (int i = 0; i < img_dim; ++i) t[i] = u(rng) < 0.25 ? u(rng) : 0.0;
        }
    }

    Matrix rotation;
    if (!cfg.images) rotation = detail::random_rotation(cfg.payload_dim, rng);

    ToyData out;
    out.dataset.taxonomy = taxonomy;
    if (cfg.images) {
        out.dataset.img_h = cfg.img_side;
        out.dataset.img_w = cfg.img_side;
        out.dataset.img_c = 1;
        out.dataset.payload_dim = img_dim;
    } else {
        out.dataset.payload_dim = cfg.payload_dim;
    }

    auto emit = [&](int count, const std::string& prefix, std::vector<std::string>& ids) {
        for (int i = 0; i < count; ++i) {
            int sub = i % k_sub;  // balanced across subclasses
            Example ex;
            std::ostringstream idos;
            idos << prefix << std::setw(6) << std::setfill('0') << i;
            ex.id = idos.str();
            ex.y_sub = sub;
            ex.y = taxonomy.super_of(sub);
            if (cfg.images) {
                ex.payload.h = cfg.img_side;
                ex.payload.w = cfg.img_side;
                ex.payload.c = 1;
                ex.payload.data = templates[std::size_t(sub)];
                for (int d = 0; d < img_dim; ++d) {
                    ex.payload.data[d] =
                        std::clamp(ex.payload.data[d] + 0.1 * gauss(rng), 0.0, 1.0);
                }
            } else {
                double sigma = cfg.noise;
                if (sub % cfg.subclasses_per_class < cfg.hard_per_class)
                    sigma *= cfg.hard_noise_mult;
                Vector v = Vector::Zero(cfg.payload_dim);
                for (int d = 0; d < cfg.latent_dim; ++d)
                    v[d] = sub_center[std::size_t(sub)][d] + sigma * gauss(rng);
                for (int d = cfg.latent_dim; d < cfg.payload_dim; ++d)
                    v[d] = cfg.distractor_sigma * gauss(rng);
                ex.payload.data = rotation * v;
            }
            if (cfg.with_meta) {
                std::uniform_int_distribution<int> coin(0, 1);
                std::uniform_int_distribution<int> age(18, 90);
                ex.meta["gender"] = coin(rng) ? "M" : "F";
                ex.meta["age"] = std::to_string(age(rng));
                ex.meta["patient_id"] = "p" + std::to_string(i / 5);
            }
            ids.push_back(ex.id);
            out.dataset.examples.push_back(std::move(ex));
        }
    };
    emit(cfg.n_train, "tr", out.train_ids);
    emit(cfg.n_test, "te", out.test_ids);
    out.dataset.reindex();
    std::sort(out.train_ids.begin(), out.train_ids.end());
    std::sort(out.test_ids.begin(), out.test_ids.end());
    return out;
}

}  // namespace deferkit
