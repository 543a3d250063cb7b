#pragma once

// Shared oracles for the test suites: chi-square tail probabilities,
// finite-difference gradient checking, and small dataset builders.

#include <cmath>
#include <functional>

#include "deferkit/dataset.hpp"
#include "deferkit/nn.hpp"

namespace testsupport {

using deferkit::Dataset;
using deferkit::Example;
using deferkit::Matrix;
using deferkit::ParamView;
using deferkit::TaxonomyMap;
using deferkit::Vector;

// --- regularized incomplete gamma, for chi-square p-values ---------------

inline double gamma_p_series(double a, double x) {
    double sum = 1.0 / a, term = sum;
    for (int n = 1; n < 500; ++n) {
        term *= x / (a + n);
        sum += term;
        if (std::abs(term) < std::abs(sum) * 1e-15) break;
    }
    return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

inline double gamma_q_contfrac(double a, double x) {
    // Lentz's algorithm for the continued fraction of Q(a, x)
    const double tiny = 1e-300;
    double b = x + 1.0 - a, c = 1.0 / tiny, d = 1.0 / b, h = d;
    for (int i = 1; i < 500; ++i) {
        double an = -double(i) * (double(i) - a);
        b += 2.0;
        d = an * d + b;
        if (std::abs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        double delta = d * c;
        h *= delta;
        if (std::abs(delta - 1.0) < 1e-15) break;
    }
    return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

/// Upper-tail probability P(X >= stat) for X ~ chi-square with df degrees.
inline double chi2_pvalue(double stat, int df) {
    if (stat <= 0.0) return 1.0;
    double a = df / 2.0, x = stat / 2.0;
    return x < a + 1.0 ? 1.0 - gamma_p_series(a, x) : gamma_q_contfrac(a, x);
}

/// Chi-square statistic of observed counts against a uniform expectation.
inline double chi2_uniform_stat(const std::vector<long>& counts) {
    double total = 0;
    for (long c : counts) total += double(c);
    double expected = total / double(counts.size());
    double stat = 0.0;
    for (long c : counts) stat += (double(c) - expected) * (double(c) - expected) / expected;
    return stat;
}

// --- finite-difference gradient oracle ------------------------------------

/// Central-difference check: loss_fn() must zero the gradients, run the
/// forward/backward pass and return the loss; params/grads view the same
/// storage it updates. Returns the worst relative error over all entries.
inline double fd_max_rel_error(std::vector<ParamView> params, std::vector<ParamView> grads,
                               const std::function<double()>& loss_fn, double eps = 1e-6) {
    loss_fn();
    // snapshot analytic gradients before the probing passes overwrite them
    std::vector<std::vector<double>> analytic;
    for (const auto& g : grads)
        analytic.emplace_back(g.data, g.data + g.size);
    double worst = 0.0;
    for (std::size_t p = 0; p < params.size(); ++p) {
        for (std::size_t i = 0; i < params[p].size; ++i) {
            double saved = params[p].data[i];
            params[p].data[i] = saved + eps;
            double up = loss_fn();
            params[p].data[i] = saved - eps;
            double down = loss_fn();
            params[p].data[i] = saved;
            double numeric = (up - down) / (2.0 * eps);
            double ana = analytic[p][i];
            double rel = std::abs(numeric - ana) / std::max({std::abs(numeric), std::abs(ana), 1e-4});
            worst = std::max(worst, rel);
        }
    }
    loss_fn();  // restore gradient state
    return worst;
}

// --- tiny dataset builders --------------------------------------------------

/// Flat k-class dataset with d-dimensional Gaussian-ish payloads generated
/// from a hash so the fixture is fully deterministic without an RNG object.
inline Dataset tiny_dataset(int n, int k, int d, bool with_expert = false,
                            std::uint64_t seed = 17) {
    Dataset ds;
    ds.taxonomy = TaxonomyMap::identity(k);
    ds.payload_dim = d;
    for (int i = 0; i < n; ++i) {
        Example ex;
        char buf[16];
        std::snprintf(buf, sizeof(buf), "x%04d", i);
        ex.id = buf;
        ex.y = i % k;
        deferkit::Rng rng = deferkit::per_id_rng(seed, ex.id);
        std::normal_distribution<double> g(0.0, 1.0);
        ex.payload.data = Vector(d);
        for (int j = 0; j < d; ++j) ex.payload.data[j] = double(ex.y) + 0.3 * g(rng);
        if (with_expert) {
            std::uniform_int_distribution<int> u(0, k - 1);
            ex.h = (i % 3 == 0) ? u(rng) : ex.y;  // mostly correct expert
            ex.h_source = "real";
        }
        ds.examples.push_back(std::move(ex));
    }
    ds.reindex();
    return ds;
}

}  // namespace testsupport
