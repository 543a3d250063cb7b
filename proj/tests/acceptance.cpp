// Acceptance gate: prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails. Criteria 1-5 and 9 are fast oracle
// checks; criteria 6-8 share one desk-scale experiment grid over five
// seeds.

#include <chrono>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "deferkit/experiment.hpp"
#include "support.hpp"

using namespace deferkit;

namespace {

struct Timer {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
};

std::vector<std::string> g_notes;

void note(const std::string& s) { g_notes.push_back(s); }

// --- criterion 1: binarization and translation oracles ---------------------

bool criterion1() {
    Rng rng = make_rng(1001);
    std::uniform_int_distribution<int> kd(2, 25);
    for (int t = 0; t < 10000; ++t) {
        int k = kd(rng);
        std::uniform_int_distribution<int> cd(0, k - 1);
        int y = cd(rng);
        int h = cd(rng);
        // brute-force definition via one-hot agreement
        std::vector<int> oh_h(std::size_t(k), 0), oh_y(std::size_t(k), 0);
        oh_h[std::size_t(h)] = 1;
        oh_y[std::size_t(y)] = 1;
        int brute = 0;
        for (int c = 0; c < k; ++c) brute += oh_h[std::size_t(c)] * oh_y[std::size_t(c)];
        if (binarize(h, y, k) != brute) {
            note("criterion 1: binarize mismatch");
            return false;
        }
    }
    // round trip: translated prediction is correct iff the binary input is 1
    for (int t = 0; t < 10000; ++t) {
        int k = kd(rng);
        std::uniform_int_distribution<int> cd(0, k - 1);
        int y = cd(rng);
        int h_bin = t % 2;
        int h_hat = translate(h_bin, y, k, rng);
        if ((h_hat == y) != (h_bin == 1)) {
            note("criterion 1: round-trip violation");
            return false;
        }
        if (binarize(h_hat, y, k) != h_bin) {
            note("criterion 1: binarize(translate) violation");
            return false;
        }
    }
    // uniformity of the wrong-class draw: k=20, 19 wrong classes
    const int k = 20, y = 7;
    std::vector<long> counts(19, 0);
    for (int t = 0; t < 19000; ++t) {
        int h_hat = translate(0, y, k, rng);
        int idx = h_hat > y ? h_hat - 1 : h_hat;
        counts[std::size_t(idx)] += 1;
    }
    double p = testsupport::chi2_pvalue(testsupport::chi2_uniform_stat(counts), 18);
    char buf[64];
    std::snprintf(buf, sizeof(buf), "criterion 1: chi-square p=%.4f", p);
    note(buf);
    return p > 0.01;
}

// --- criterion 2: loss degeneracies ----------------------------------------

bool criterion2() {
    Dataset ds = testsupport::tiny_dataset(32, 2, 3, true);
    std::vector<std::string> ids = all_ids(ds);
    std::vector<std::string> l_ids(ids.begin(), ids.begin() + 8);
    std::vector<std::string> u_ids(ids.begin() + 8, ids.end());
    AugmentationPolicy policy = AugmentationPolicy::for_dataset(ds);
    std::vector<int> hb = binary_expert_labels(ds, l_ids);

    auto fresh = [&](ExpertiseModel& m, const SSLConfig& cfg, std::uint64_t s) {
        Rng init = make_rng(s);
        m.own_backbone = make_backbone(ds, BackboneConfig{}, init);
        m.head = Linear(m.own_backbone->out_dim(), 2, init);
        m.projection = Mlp(m.own_backbone->out_dim(), {cfg.proj_hidden}, cfg.proj_dim, init);
    };

    {   // lambda_u = 0: total is exactly the supervised term
        SSLConfig cfg;
        cfg.lambda_u = 0.0;
        cfg.lambda_c = 0.0;
        cfg.soft_pseudo_labels = false;
        ExpertiseModel m;
        fresh(m, cfg, 21);
        Rng rng = make_rng(22);
        SslBatchTerms t =
            ssl_batch_pass(m, ds, l_ids, hb, u_ids, policy, cfg, false, nullptr, rng, false);
        if (t.total != t.ls) {
            note("criterion 2: lambda_u=0 total != ls");
            return false;
        }
    }
    {   // unreachable threshold: the unlabeled term is exactly zero
        SSLConfig cfg;
        cfg.tau = 1.0;
        cfg.lambda_c = 0.0;
        cfg.soft_pseudo_labels = false;
        ExpertiseModel m;
        fresh(m, cfg, 23);
        Rng rng = make_rng(24);
        SslBatchTerms t =
            ssl_batch_pass(m, ds, l_ids, hb, u_ids, policy, cfg, false, nullptr, rng, false);
        if (t.lu != 0.0 || t.mask_rate != 0.0 || t.total != t.ls) {
            note("criterion 2: tau=1 unlabeled term nonzero");
            return false;
        }
    }
    {   // graph variant with lambda_c=0 and smoothing off matches hard labels
        SSLConfig cfg;
        cfg.lambda_c = 0.0;
        cfg.soft_pseudo_labels = false;
        cfg.tau = 0.5;
        ExpertiseModel a, b;
        fresh(a, cfg, 25);
        fresh(b, cfg, 25);
        Rng ra = make_rng(26), rb = make_rng(26);
        MemoryBank bank;
        SslBatchTerms ta =
            ssl_batch_pass(a, ds, l_ids, hb, u_ids, policy, cfg, false, nullptr, ra, false);
        SslBatchTerms tb =
            ssl_batch_pass(b, ds, l_ids, hb, u_ids, policy, cfg, true, &bank, rb, false);
        if (std::abs(ta.total - tb.total) >= 1e-6 || std::abs(ta.ls - tb.ls) >= 1e-6 ||
            std::abs(ta.lu - tb.lu) >= 1e-6 || tb.lc != 0.0) {
            note("criterion 2: graph variant does not reduce to hard-label objective");
            return false;
        }
    }
    return true;
}

// --- criterion 3: gradient checks -------------------------------------------

bool criterion3() {
    Rng rng = make_rng(31);
    std::normal_distribution<double> g(0.0, 1.0);
    double worst_ce = 0.0, worst_sur = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        int k = 2 + trial % 5;
        {   // mean cross-entropy of the label-trained classifier head
            Linear layer(5, k, rng);
            Matrix x(4, 5);
            for (int i = 0; i < 4; ++i)
                for (int j = 0; j < 5; ++j) x(i, j) = g(rng);
            std::vector<int> y;
            for (int i = 0; i < 4; ++i) y.push_back((trial + i) % k);
            std::vector<ParamView> params, grads;
            layer.params(params);
            layer.grads(grads);
            double err = testsupport::fd_max_rel_error(params, grads, [&] {
                layer.zero_grad();
                Matrix d;
                double loss = ce_loss(layer.forward(x), y, &d);
                layer.backward(d);
                return loss;
            });
            worst_ce = std::max(worst_ce, err);
        }
        {   // (k+1)-output surrogate loss
            Linear layer(5, k + 1, rng);
            Matrix x(3, 5);
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 5; ++j) x(i, j) = g(rng);
            std::vector<int> y = {trial % k, (trial + 1) % k, (trial + 2) % k};
            std::vector<int> agree = {trial % 2, (trial + 1) % 2, 1};
            std::vector<ParamView> params, grads;
            layer.params(params);
            layer.grads(grads);
            double err = testsupport::fd_max_rel_error(params, grads, [&] {
                layer.zero_grad();
                Matrix d;
                double loss = surrogate_loss(layer.forward(x), y, agree, &d);
                layer.backward(d);
                return loss;
            });
            worst_sur = std::max(worst_sur, err);
        }
    }
    char buf[96];
    std::snprintf(buf, sizeof(buf), "criterion 3: worst rel err ce=%.2e surrogate=%.2e", worst_ce,
                  worst_sur);
    note(buf);
    return worst_ce < 1e-4 && worst_sur < 1e-4;
}

// --- criterion 4: boundary identities ---------------------------------------

bool criterion4() {
    Dataset ds = testsupport::tiny_dataset(500, 4, 3, true);
    TrainConfig tcfg;
    tcfg.epochs = 10;
    auto emb = std::make_shared<EmbeddingModel>(train_embedding(ds, BackboneConfig{}, tcfg));
    std::vector<std::string> ids = all_ids(ds);
    Classification cls = classify(*emb, ds, ids);

    double classifier_alone = 0;
    for (std::size_t i = 0; i < ids.size(); ++i)
        classifier_alone += cls.classes[i] == ds.by_id(ids[i]).y;
    classifier_alone /= double(ids.size());
    double expert_alone = 0;
    for (const auto& id : ids) expert_alone += ds.by_id(id).h == ds.by_id(id).y;
    expert_alone /= double(ids.size());

    auto forced = [&](int constant_class) {
        auto exp = std::make_shared<ExpertiseModel>();
        exp->embedding = emb.get();
        exp->degenerate = true;
        exp->constant_class = constant_class;
        return train_confidence_compare(emb, exp);
    };
    TeamModel never = forced(0);   // A == 0 everywhere
    TeamModel always = forced(1);  // A == 1 everywhere
    auto d0 = team_predict(never, ds, ids);
    auto d1 = team_predict(always, ds, ids);
    if (coverage(d0) != 1.0 || coverage(d1) != 0.0) {
        note("criterion 4: forced coverage not 1/0");
        return false;
    }
    // bit-exact equality, not approximate
    if (system_accuracy(d0) != classifier_alone) {
        note("criterion 4: A==0 accuracy differs from Classifier Alone");
        return false;
    }
    if (system_accuracy(d1) != expert_alone) {
        note("criterion 4: A==1 accuracy differs from Expert Alone");
        return false;
    }
    Boundaries b = boundaries(ds, ids, *emb);
    return b.classifier_alone == classifier_alone && b.expert_alone == expert_alone;
}

// --- criterion 9: metric oracles --------------------------------------------

bool criterion9() {
    // F0.5 on a 10-row fixture: tp=4 fp=1 fn=2
    std::vector<int> pred = {1, 1, 1, 1, 1, 0, 0, 0, 0, 0};
    std::vector<int> truth = {1, 1, 1, 1, 0, 1, 1, 0, 0, 0};
    double expected_f05 = 1.25 * 4.0 / (1.25 * 4.0 + 0.25 * 2.0 + 1.0);
    if (f_beta(pred, truth) != expected_f05) {
        note("criterion 9: F0.5 fixture mismatch");
        return false;
    }

    // 10-row bias fixture: 5 M ages 20-24 (4 correct), 5 F ages 25-29 (2 correct)
    Dataset ds;
    ds.taxonomy = TaxonomyMap::identity(2);
    ds.payload_dim = 1;
    std::vector<PredictionRow> dump;
    for (int i = 0; i < 10; ++i) {
        Example ex;
        ex.id = "b" + std::to_string(i);
        ex.y = 0;
        ex.payload.data = Vector::Zero(1);
        ex.meta["gender"] = i < 5 ? "M" : "F";
        ex.meta["age"] = std::to_string(20 + i);
        ds.examples.push_back(ex);
        bool correct = (i < 5) ? i != 0 : i >= 8;
        dump.push_back({"b" + std::to_string(i), 0, 0, 0, correct ? 0 : 1, correct ? 0 : 1});
    }
    ds.reindex();
    BiasReport rep = bias_report(dump, ds);
    if (rep.gender_gap != std::abs(4.0 / 5.0 - 2.0 / 5.0)) {
        note("criterion 9: gender gap fixture mismatch");
        return false;
    }
    // quintiles of two by age: accuracies 1/2, 2/2, 1/2, 0/2, 2/2; overall 6/10
    double overall = 6.0 / 10.0;
    double mad = 0.0;
    for (double acc : {1.0 / 2.0, 2.0 / 2.0, 1.0 / 2.0, 0.0 / 2.0, 2.0 / 2.0})
        mad += std::abs(acc - overall);
    mad /= 5.0;
    if (rep.age_mad != mad || rep.age_bin_accuracy.size() != 5) {
        note("criterion 9: age-bin MAD fixture mismatch");
        return false;
    }
    return true;
}

}  // namespace

// --- criteria 5-8: shared desk-scale grid ------------------------------------

struct DeskScale {
    double mean_cls = 0.0, mean_exp = 0.0;
    std::map<std::string, double> mean_m6, mean_complete;
    std::map<int, std::map<std::string, double>> mean_f05;  // budget m -> variant
    double fidelity_acc = 0.0, fidelity_strength = 0.0;
    std::vector<std::string> failures;
};

// single warm-started triage round: repeated refits on the kept set only
// ratchet toward over-deferral on this task
constexpr int kTriageRounds = 1;

static DeskScale run_desk_scale(int n_seeds) {
    ToyConfig tc;
    tc.k = 10;
    tc.subclasses_per_class = 5;
    tc.n_train = 5000;
    tc.n_test = 1000;
    tc.latent_dim = 8;
    tc.payload_dim = 40;
    tc.super_radius = 0.5;
    tc.sub_radius = 3.0;
    tc.noise = 0.9;
    tc.distractor_sigma = 2.5;
    tc.hard_per_class = 2;
    tc.hard_noise_mult = 3.0;
    tc.seed = 7;
    ToyData toy = make_toy_dataset(tc);
    Dataset& ds = toy.dataset;
    AugmentationPolicy policy = AugmentationPolicy::for_dataset(ds);
    BackboneConfig bcfg;
    DeskScale out;
    const double w = 1.0 / double(n_seeds);

    for (int s = 1; s <= n_seeds; ++s) {
        auto seed = std::uint64_t(s);
        TrainConfig etc;
        etc.epochs = 30;
        etc.lr = 0.02;
        etc.seed = seed;
        auto emb = std::make_shared<EmbeddingModel>(train_embedding(ds, toy.train_ids, bcfg, etc));

        Matrix feats = extract_features(*emb, ds, toy.train_ids);
        std::vector<int> subs;
        for (const auto& id : toy.train_ids) subs.push_back(ds.by_id(id).y_sub);
        Matrix sim = build_similarity_matrix(feats, subs, ds.k_sub());

        if (s == 1) {
            // high-strength expert for the fidelity check (criterion 5)
            SyntheticExpert strong =
                sample_strength_set(sim, ds.taxonomy, 45, hash_combine(seed, "H90"));
            double acc = 0, str_ok = 0, str_n = 0;
            for (const auto& id : toy.test_ids) {
                const Example& e = ds.by_id(id);
                int h = strong.predict(e.y_sub, id);  // already a superclass
                acc += h == e.y;
                if (strong.is_strength(e.y_sub)) {
                    str_n += 1;
                    str_ok += h == e.y;
                }
            }
            out.fidelity_acc = acc / double(toy.test_ids.size());
            out.fidelity_strength = str_n > 0 ? str_ok / str_n : 0.0;
        }

        // 60%-strength expert: 30 of the 50 subclasses
        SyntheticExpert expert = sample_strength_set(sim, ds.taxonomy, 30, hash_combine(seed, "H"));
        Dataset dsf = ds;
        materialize_expert_predictions(dsf, expert, toy.train_ids);
        materialize_expert_predictions(dsf, expert, toy.test_ids);
        Boundaries b = boundaries(dsf, toy.test_ids, *emb);
        out.mean_cls += w * b.classifier_alone;
        out.mean_exp += w * b.expert_alone;

        SupervisedConfig sup;
        sup.seed = seed;
        TrainConfig dtc;
        dtc.epochs = 30;
        dtc.lr = 0.05;
        dtc.seed = seed;

        // complete-regime upper boundary per algorithm
        auto ce = std::make_shared<ExpertiseModel>(train_supervised_head(
            dsf, toy.train_ids, *emb, SupervisedVariant::single_layer_softmax, sup));
        for (const char* alg : {"surrogate", "confidence-compare", "nll-triage"}) {
            try {
                TeamModel team =
                    train_defer_algorithm(alg, dsf, toy.train_ids, emb, ce, bcfg, dtc,
                                          kTriageRounds, seed);
                out.mean_complete[alg] += w * system_accuracy(team_predict(team, dsf, toy.test_ids));
            } catch (const std::exception& e) {
                out.failures.push_back(std::string("complete ") + alg + ": " + e.what());
            }
        }

        SSLConfig ssl;
        ssl.tau = 0.8;
        ssl.epochs = 100;
        ssl.mu = 7;
        ssl.batch_size = 8;
        ssl.lr = 0.01;
        ssl.seed = seed;
        for (int m : {4, 6}) {
            DatasetSplit split = sample_labeled_subset(dsf, toy.train_ids, m, hash_combine(seed, m));
            std::vector<int> u_truth;
            for (const auto& id : split.unlabeled_ids) {
                const Example& e = dsf.by_id(id);
                u_truth.push_back(binarize(e.h, e.y, dsf.k()));
            }
            std::shared_ptr<ExpertiseModel> fixmatch;
            for (const char* variant : {"fixmatch", "comatch", "raw-fixmatch", "raw-comatch"}) {
                try {
                    auto model = std::make_shared<ExpertiseModel>(
                        train_expertise_variant(variant, dsf, split.labeled_ids,
                                                split.unlabeled_ids, emb.get(), bcfg, policy, ssl,
                                                sup, seed));
                    CorrectnessPrediction cp =
                        predict_correctness(*model, dsf, split.unlabeled_ids);
                    out.mean_f05[m][variant] += w * f_beta(cp.h_bin_hat, u_truth);
                    if (std::string(variant) == "fixmatch") fixmatch = model;
                } catch (const std::exception& e) {
                    out.failures.push_back(std::string(variant) + " m=" + std::to_string(m) + ": " +
                                           e.what());
                }
            }
            if (m == 6 && fixmatch) {
                Dataset completed = complete_dataset(dsf, split.labeled_ids, split.unlabeled_ids,
                                                     *fixmatch, hash_combine(seed, "fixmatch"));
                for (const char* alg : {"surrogate", "confidence-compare", "nll-triage"}) {
                    try {
                        TeamModel team = train_defer_algorithm(alg, completed, all_ids(completed),
                                                               emb, fixmatch, bcfg, dtc,
                                                               kTriageRounds, seed);
                        out.mean_m6[alg] +=
                            w * system_accuracy(team_predict(team, dsf, toy.test_ids));
                    } catch (const std::exception& e) {
                        out.failures.push_back(std::string(alg) + " m=6: " + e.what());
                    }
                }
            }
        }
    }
    return out;
}

int main() {
    int failed = 0;
    auto report = [&](int n, bool ok, const std::string& what, double secs) {
        std::printf("%s criterion %d: %s (%.1fs)\n", ok ? "PASS" : "FAIL", n, what.c_str(), secs);
        if (!ok) ++failed;
        for (const auto& s : g_notes) std::printf("       %s\n", s.c_str());
        g_notes.clear();
    };

    {
        Timer t;
        bool ok = criterion1();
        report(1, ok, "binarization / translation / wrong-class uniformity oracles", t.seconds());
    }
    {
        Timer t;
        bool ok = criterion2();
        report(2, ok, "loss degeneracies (lambda_u=0, tau=1, graph variant off)", t.seconds());
    }
    {
        Timer t;
        bool ok = criterion3();
        report(3, ok, "analytic gradients match finite differences", t.seconds());
    }
    {
        Timer t;
        bool ok = criterion4();
        report(4, ok, "forced-deferral boundary identities are bit-exact", t.seconds());
    }

    Timer desk_t;
    DeskScale d = run_desk_scale(5);
    double desk_secs = desk_t.seconds();
    for (const auto& f : d.failures) note("desk-scale cell failure: " + f);

    {
        char buf[128];
        std::snprintf(buf, sizeof(buf),
                      "high-strength expert fidelity: acc=%.3f strengths=%.3f", d.fidelity_acc,
                      d.fidelity_strength);
        bool ok = d.fidelity_acc >= 0.90 && d.fidelity_strength == 1.0;
        report(5, ok, buf, desk_secs);
    }
    {
        double lower = std::max(d.mean_cls, d.mean_exp);
        bool ok = d.failures.empty();
        std::string what = "team beats both members: lower=" + std::to_string(lower);
        for (const auto& [alg, acc] : d.mean_m6) {
            ok = ok && acc >= lower;
            what += " " + alg + "=" + std::to_string(acc);
        }
        ok = ok && d.mean_m6.size() == 3;
        report(6, ok, what, 0.0);
    }
    {
        // mean system accuracy across the three algorithms vs the same
        // mean in the complete-expert-predictions regime
        bool ok = d.mean_complete.size() == 3 && d.mean_m6.size() == 3;
        double budgeted = 0.0, complete = 0.0;
        for (const auto& [alg, acc] : d.mean_m6) budgeted += acc / 3.0;
        for (const auto& [alg, acc] : d.mean_complete) complete += acc / 3.0;
        ok = ok && budgeted >= 0.95 * complete;
        char buf[128];
        std::snprintf(buf, sizeof(buf),
                      "budgeted mean %.3f vs complete-regime upper boundary %.3f (ratio %.3f)",
                      budgeted, complete, complete > 0 ? budgeted / complete : 0.0);
        report(7, ok, buf, 0.0);
    }
    {
        bool ok = true;
        std::string what = "embedding SSL beats raw SSL at the two smallest budgets:";
        for (int m : {4, 6}) {
            auto& v = d.mean_f05[m];
            ok = ok && v["fixmatch"] > v["raw-fixmatch"] && v["comatch"] > v["raw-comatch"];
            char buf[128];
            std::snprintf(buf, sizeof(buf), " m=%d fm=%.3f/%.3f cm=%.3f/%.3f", m, v["fixmatch"],
                          v["raw-fixmatch"], v["comatch"], v["raw-comatch"]);
            what += buf;
        }
        report(8, ok, what, 0.0);
    }
    {
        Timer t;
        bool ok = criterion9();
        report(9, ok, "metric fixtures (F0.5, gender gap, age-bin MAD) match exactly", t.seconds());
    }

    std::printf("%s: %d/9 criteria passed\n", failed == 0 ? "ACCEPTED" : "REJECTED", 9 - failed);
    return failed == 0 ? 0 : 1;
}
