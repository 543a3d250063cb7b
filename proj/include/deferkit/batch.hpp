#pragma once

// Row-batch assembly from datasets and id lists.

#include "deferkit/augment.hpp"
#include "deferkit/dataset.hpp"

namespace deferkit {

inline Matrix payload_batch(const Dataset& ds, const std::vector<std::string>& ids) {
    if (ids.empty()) throw PreconditionError("payload_batch: empty id list");
    Matrix x(Eigen::Index(ids.size()), ds.payload_dim);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const Example& ex = ds.by_id(ids[i]);
        if (ex.payload.dim() != ds.payload_dim)
            throw InputError("payload shape mismatch for id " + ex.id);
        x.row(Eigen::Index(i)) = ex.payload.data.transpose();
    }
    return x;
}

inline Matrix augmented_batch(const Dataset& ds, const std::vector<std::string>& ids,
                              const AugmentationPolicy& policy, bool strong, Rng& rng) {
    Matrix x(Eigen::Index(ids.size()), ds.payload_dim);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const Example& ex = ds.by_id(ids[i]);
        Payload p = strong ? policy.strong(ex.payload, rng) : policy.weak(ex.payload, rng);
        x.row(Eigen::Index(i)) = p.data.transpose();
    }
    return x;
}

inline std::vector<int> labels_of(const Dataset& ds, const std::vector<std::string>& ids) {
    std::vector<int> y(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) y[i] = ds.by_id(ids[i]).y;
    return y;
}

inline std::vector<std::string> all_ids(const Dataset& ds) {
    std::vector<std::string> ids;
    ids.reserve(ds.size());
    for (const auto& ex : ds.examples) ids.push_back(ex.id);
    return ids;
}

/// First-occurrence argmax per row; ties resolve to the lowest index.
inline std::vector<int> argmax_rows(const Matrix& m) {
    std::vector<int> out(std::size_t(m.rows()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        int best = 0;
        for (Eigen::Index j = 1; j < m.cols(); ++j)
            if (m(i, j) > m(i, best)) best = int(j);
        out[std::size_t(i)] = best;
    }
    return out;
}

}  // namespace deferkit
