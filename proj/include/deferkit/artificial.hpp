#pragma once

// Turns binary correctness predictions into multi-class artificial expert
// predictions and completes the dataset so every instance carries an
// expert column. Wrong-class identities are drawn uniformly by design;
// the expert's actual confusion structure is deliberately not modeled here.

#include <unordered_set>

#include "deferkit/dataset.hpp"
#include "deferkit/expertise.hpp"

namespace deferkit {

/// Correct -> the true class; incorrect -> uniform over the other k-1.
inline int translate(int h_bin_hat, int y, int k, Rng& rng) {
    if (y < 0 || y >= k || k < 2) {
        if (h_bin_hat == 0 && k < 2)
            throw PreconditionError("translate: no wrong class to draw from (k < 2)");
        if (y < 0 || y >= k) throw PreconditionError("translate: y out of range");
    }
    if (h_bin_hat == 1) return y;
    std::uniform_int_distribution<int> d(0, k - 2);
    int p = d(rng);
    return p >= y ? p + 1 : p;
}

/// Seed-deterministic per instance id: the draw depends only on
/// (seed, id), not on processing order.
inline int translate(int h_bin_hat, int y, int k, std::uint64_t seed, const std::string& id) {
    Rng rng = per_id_rng(hash_combine(seed, std::string_view("translate")), id);
    return translate(h_bin_hat, y, k, rng);
}

/// Fills the expert column for all of U with artificial predictions while
/// leaving the real predictions on L untouched. Returns a new dataset with
/// |L| + |U| rows, each carrying an expert prediction and provenance tag.
inline Dataset complete_dataset(const Dataset& ds, const std::vector<std::string>& l_ids,
                                const std::vector<std::string>& u_ids,
                                const ExpertiseModel& model, std::uint64_t seed) {
    std::unordered_set<std::string> l_set(l_ids.begin(), l_ids.end());
    for (const auto& id : u_ids)
        if (l_set.count(id))
            throw IntegrityError("complete_dataset: id in both L and U: " + id);

    Dataset out;
    out.taxonomy = ds.taxonomy;
    out.payload_dim = ds.payload_dim;
    out.img_h = ds.img_h;
    out.img_w = ds.img_w;
    out.img_c = ds.img_c;

    for (const auto& id : l_ids) {
        Example ex = ds.by_id(id);
        if (ex.h < 0) throw PreconditionError("labeled id " + id + " has no expert prediction");
        ex.h_source = "real";
        out.examples.push_back(std::move(ex));
    }
    if (!u_ids.empty()) {
        CorrectnessPrediction pred = predict_correctness(model, ds, u_ids);
        for (std::size_t i = 0; i < u_ids.size(); ++i) {
            Example ex = ds.by_id(u_ids[i]);
            ex.h_bin_hat = pred.h_bin_hat[i];
            ex.confidence = pred.confidence[i];
            ex.h = translate(ex.h_bin_hat, ex.y, ds.k(), seed, ex.id);
            ex.h_source = "artificial";
            out.examples.push_back(std::move(ex));
        }
    }
    out.reindex();
    return out;
}

}  // namespace deferkit
