#pragma once

// Synthetic experts over a subclass taxonomy: similarity-weighted strength
// sets, and similarity-weighted confusion on weakness subclasses. An expert
// is a pure seeded function of (subclass, instance id).

#include <fstream>
#include <set>

#include "deferkit/common.hpp"
#include "deferkit/dataset.hpp"

namespace deferkit {

/// Mean pairwise cosine similarity between subclasses, affinely mapped
/// from [-1,1] to [0,1]. Cross-class entries reduce to the dot product of
/// per-class means of the normalized feature vectors; within-class entries
/// exclude self-pairs (a single-instance subclass gets 1).
inline Matrix build_similarity_matrix(const Matrix& features, const std::vector<int>& sub_labels,
                                      int k_sub) {
    if (std::size_t(features.rows()) != sub_labels.size())
        throw PreconditionError("build_similarity_matrix: label/feature count mismatch");
    std::vector<int> count(std::size_t(k_sub), 0);
    Matrix unit = features;
    for (Eigen::Index i = 0; i < unit.rows(); ++i) {
        double norm = unit.row(i).norm();
        if (!(norm > 0.0))
            throw NumericError("zero-norm feature vector at row " + std::to_string(i));
        unit.row(i) /= norm;
        int s = sub_labels[std::size_t(i)];
        if (s < 0 || s >= k_sub) throw PreconditionError("subclass label out of range");
        ++count[std::size_t(s)];
    }
    for (int s = 0; s < k_sub; ++s)
        if (count[std::size_t(s)] == 0)
            throw InsufficientDataError("subclass " + std::to_string(s + 1) +
                                        " has no instances for similarity");
    Matrix sums = Matrix::Zero(k_sub, unit.cols());
    for (Eigen::Index i = 0; i < unit.rows(); ++i)
        sums.row(sub_labels[std::size_t(i)]) += unit.row(i);

    Matrix s_mat(k_sub, k_sub);
    for (int a = 0; a < k_sub; ++a) {
        double na = double(count[std::size_t(a)]);
        for (int b = a; b < k_sub; ++b) {
            double cos_ab;
            if (a == b) {
                cos_ab = na > 1.0 ? (sums.row(a).squaredNorm() - na) / (na * (na - 1.0)) : 1.0;
            } else {
                cos_ab = sums.row(a).dot(sums.row(b)) / (na * double(count[std::size_t(b)]));
            }
            if (!std::isfinite(cos_ab)) throw NumericError("non-finite similarity entry");
            double mapped = (cos_ab + 1.0) / 2.0;
            s_mat(a, b) = mapped;
            s_mat(b, a) = mapped;
        }
    }
    return s_mat;
}

struct SyntheticExpert {
    std::vector<int> strengths;  // sorted, 0-based subclass indices
    int base = -1;
    std::uint64_t seed = 0;
    Matrix similarity;  // k_sub x k_sub
    TaxonomyMap taxonomy;

    bool is_strength(int sub) const {
        return std::binary_search(strengths.begin(), strengths.end(), sub);
    }

    /// Superclass prediction for an instance with true subclass y_sub.
    /// Strengths map through the taxonomy; weaknesses draw a subclass with
    /// probability proportional to its similarity to y_sub (the true
    /// subclass stays in the support, so a weakness draw can still land on
    /// the correct superclass).
    int predict(int y_sub, const std::string& id) const {
        if (y_sub < 0 || y_sub >= taxonomy.k_sub())
            throw PreconditionError("expert_predict: y_sub out of range");
        if (is_strength(y_sub)) return taxonomy.super_of(y_sub);
        Rng rng = per_id_rng(hash_combine(seed, std::string_view("predict")), id);
        std::vector<double> w(std::size_t(taxonomy.k_sub()));
        for (int s = 0; s < taxonomy.k_sub(); ++s) w[std::size_t(s)] = similarity(y_sub, s);
        std::vector<bool> alive(w.size(), true);
        int drawn = int(weighted_pick(w, alive, rng));
        return taxonomy.super_of(drawn);
    }

    void save(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw ParseError("cannot write expert spec: " + path);
        f << "# deferkit-expert v1\n";
        f << "seed=" << seed << "\n";
        f << "base=" << base + 1 << "\n";
        f << "strengths=";
        for (std::size_t i = 0; i < strengths.size(); ++i)
            f << (i ? "," : "") << strengths[i] + 1;
        f << "\n";
        f << "k=" << taxonomy.k << "\n";
        f << "taxonomy=";
        for (int i = 0; i < taxonomy.k_sub(); ++i)
            f << (i ? "," : "") << taxonomy.sub_to_super[std::size_t(i)] + 1;
        f << "\n";
        f << "similarity=" << similarity.rows() << "\n";
        f.precision(17);
        for (Eigen::Index i = 0; i < similarity.rows(); ++i) {
            for (Eigen::Index j = 0; j < similarity.cols(); ++j)
                f << (j ? " " : "") << similarity(i, j);
            f << "\n";
        }
    }

    static SyntheticExpert load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw ParseError("cannot open expert spec: " + path);
        SyntheticExpert ex;
        std::string line;
        int s_rows = 0;
        while (std::getline(f, line)) {
            if (line.empty() || line[0] == '#') continue;
            auto eq = line.find('=');
            if (eq == std::string::npos) throw ParseError("expert spec: bad line '" + line + "'");
            std::string key = line.substr(0, eq), val = line.substr(eq + 1);
            if (key == "seed") ex.seed = std::stoull(val);
            else if (key == "base") ex.base = std::stoi(val) - 1;
            else if (key == "k") ex.taxonomy.k = std::stoi(val);
            else if (key == "strengths") {
                std::stringstream ss(val);
                std::string tok;
                while (std::getline(ss, tok, ',')) ex.strengths.push_back(std::stoi(tok) - 1);
            } else if (key == "taxonomy") {
                std::stringstream ss(val);
                std::string tok;
                while (std::getline(ss, tok, ','))
                    ex.taxonomy.sub_to_super.push_back(std::stoi(tok) - 1);
            } else if (key == "similarity") {
                s_rows = std::stoi(val);
                ex.similarity.resize(s_rows, s_rows);
                for (int i = 0; i < s_rows; ++i)
                    for (int j = 0; j < s_rows; ++j)
                        if (!(f >> ex.similarity(i, j)))
                            throw ParseError("expert spec: truncated similarity matrix");
            }
        }
        std::sort(ex.strengths.begin(), ex.strengths.end());
        ex.taxonomy.validate();
        if (ex.base < 0 || !ex.is_strength(ex.base))
            throw IntegrityError("expert spec: base must be a strength");
        return ex;
    }
};

/// Draws a strength base uniformly, then the remaining strengths without
/// replacement with probability proportional to similarity to the base.
inline SyntheticExpert sample_strength_set(const Matrix& similarity, const TaxonomyMap& taxonomy,
                                           int n_strengths, std::uint64_t seed) {
    const int k_sub = int(similarity.rows());
    if (n_strengths < 1 || n_strengths > k_sub)
        throw PreconditionError("sample_strength_set: n_strengths must be in 1..k_sub");
    if (taxonomy.k_sub() != k_sub)
        throw PreconditionError("sample_strength_set: taxonomy/similarity size mismatch");
    Rng rng = make_rng(seed);
    std::uniform_int_distribution<int> ub(0, k_sub - 1);
    SyntheticExpert ex;
    ex.seed = seed;
    ex.similarity = similarity;
    ex.taxonomy = taxonomy;
    ex.base = ub(rng);
    std::vector<bool> alive(std::size_t(k_sub), true);
    alive[std::size_t(ex.base)] = false;
    ex.strengths.push_back(ex.base);
    std::vector<double> w(static_cast<std::size_t>(k_sub));
    for (int s = 0; s < k_sub; ++s) w[std::size_t(s)] = similarity(ex.base, s);
    for (int i = 1; i < n_strengths; ++i) {
        int pick = int(weighted_pick(w, alive, rng));
        alive[std::size_t(pick)] = false;
        ex.strengths.push_back(pick);
    }
    std::sort(ex.strengths.begin(), ex.strengths.end());
    return ex;
}

/// Writes the expert's prediction into h for every given id (cached once so
/// all downstream methods see identical expert behavior).
inline void materialize_expert_predictions(Dataset& ds, const SyntheticExpert& expert,
                                           const std::vector<std::string>& ids) {
    for (const auto& id : ids) {
        Example& ex = ds.by_id(id);
        if (ex.y_sub < 0) throw MetadataError("id " + id + ": y_sub required for synthetic expert");
        ex.h = expert.predict(ex.y_sub, ex.id);
        ex.h_source = "real";
    }
}

}  // namespace deferkit
