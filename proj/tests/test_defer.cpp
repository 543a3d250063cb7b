#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "deferkit/experiment.hpp"
#include "support.hpp"

using namespace deferkit;

namespace {

std::string temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "deferkit_defer_tests" / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir.string();
}

// two linearly separable clusters; expert correct exactly on cluster 1
Dataset half_expert_dataset(int n) {
    Dataset ds = testsupport::tiny_dataset(n, 2, 3);
    for (auto& ex : ds.examples) {
        ex.h = ex.y == 1 ? ex.y : 1 - ex.y;
        ex.h_source = "real";
    }
    return ds;
}

EmbeddingModel quick_embedding(const Dataset& ds, int epochs = 25) {
    TrainConfig tcfg;
    tcfg.epochs = epochs;
    return train_embedding(ds, BackboneConfig{}, tcfg);
}

}  // namespace

TEST_SUITE("surrogate") {
    TEST_CASE("hand-evaluated losses on uniform logits, k=2") {
        Matrix logits = Matrix::Zero(1, 3);  // k+1 = 3 outputs
        Matrix d;
        // expert agrees: both cross-entropy terms are ln 3
        CHECK(surrogate_loss(logits, {0}, {1}, &d) ==
              doctest::Approx(2.0 * std::log(3.0)).epsilon(1e-12));
        // expert disagrees: the deferral term vanishes
        CHECK(surrogate_loss(logits, {0}, {0}, &d) ==
              doctest::Approx(std::log(3.0)).epsilon(1e-12));
    }

    TEST_CASE("gradient matches finite differences on random instances") {
        Rng rng = make_rng(21);
        std::normal_distribution<double> g(0.0, 1.0);
        for (int trial = 0; trial < 20; ++trial) {
            int k = 2 + trial % 4;
            Linear layer(4, k + 1, rng);
            Matrix x(3, 4);
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 4; ++j) x(i, j) = g(rng);
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
            CHECK(err < 1e-4);
        }
    }

    TEST_CASE("trained surrogate defers where the expert is reliable") {
        Dataset ds = half_expert_dataset(200);
        TrainConfig tcfg;
        tcfg.epochs = 40;
        TeamModel team = train_surrogate(ds, all_ids(ds), BackboneConfig{}, tcfg);
        auto dump = team_predict(team, ds, all_ids(ds));
        CHECK(system_accuracy(dump) > 0.95);
        Dataset no_h = testsupport::tiny_dataset(6, 2, 3);
        CHECK_THROWS_AS(train_surrogate(no_h, all_ids(no_h), BackboneConfig{}, tcfg),
                        PreconditionError);
    }
}

TEST_SUITE("confidence_compare") {
    TEST_CASE("defers on strict inequality only") {
        Dataset ds = half_expert_dataset(100);
        auto emb = std::make_shared<EmbeddingModel>(quick_embedding(ds));
        auto exp = std::make_shared<ExpertiseModel>(train_supervised_head(
            ds, all_ids(ds), *emb, SupervisedVariant::single_layer_softmax, {}));
        TeamModel team = train_confidence_compare(emb, exp);
        TeamDecision dec = team_decide(team, ds, all_ids(ds));
        Classification cls = classify(*emb, ds, all_ids(ds));
        CorrectnessPrediction cp = predict_correctness(*exp, ds, all_ids(ds));
        for (std::size_t i = 0; i < ds.size(); ++i) {
            double cc = cls.distributions(Eigen::Index(i), cls.classes[i]);
            CHECK(dec.defer[i] == (cp.p_correct[i] > cc ? 1 : 0));
        }
        CHECK_THROWS_AS(train_confidence_compare(nullptr, exp), PreconditionError);
    }
}

TEST_SUITE("nll_triage") {
    TEST_CASE("untrained classifier is exactly uniform") {
        Dataset ds = half_expert_dataset(40);
        TriageConfig cfg;
        cfg.rounds = 1;
        cfg.classifier.epochs = 0;  // keep the zero-initialized head
        cfg.defer_predictor.epochs = 1;
        TeamModel team = train_nll_triage(ds, all_ids(ds), BackboneConfig{}, cfg);
        Matrix x = payload_batch(ds, all_ids(ds));
        Matrix p = softmax_rows(team.head.infer(team.backbone->infer(x)));
        for (Eigen::Index i = 0; i < p.rows(); ++i)
            for (Eigen::Index j = 0; j < p.cols(); ++j)
                CHECK(p(i, j) == doctest::Approx(0.5).epsilon(1e-12));  // ln k classifier NLL
    }

    TEST_CASE("converges to the true partition on a separable task") {
        Dataset ds = half_expert_dataset(200);
        TriageConfig cfg;
        cfg.classifier.epochs = 25;
        cfg.defer_predictor.epochs = 25;
        std::vector<double> losses;
        TeamModel team = train_nll_triage(ds, all_ids(ds), BackboneConfig{}, cfg, &losses);
        auto dump = team_predict(team, ds, all_ids(ds));
        CHECK(system_accuracy(dump) == doctest::Approx(1.0));
        // defers on the expert's reliable half, keeps the other
        for (const auto& r : dump) CHECK(r.deferred == (r.y == 1 ? 1 : 0));
        for (std::size_t i = 1; i < losses.size(); ++i)
            CHECK(losses[i] <= losses[i - 1] + 1e-3);  // per-round loss nonincreasing
    }

    TEST_CASE("a never-correct expert receives zero deferrals") {
        Dataset ds = testsupport::tiny_dataset(60, 2, 3);
        for (auto& ex : ds.examples) {
            ex.h = 1 - ex.y;
            ex.h_source = "real";
        }
        TriageConfig cfg;
        cfg.classifier.epochs = 20;
        cfg.defer_predictor.epochs = 20;
        TeamModel team = train_nll_triage(ds, all_ids(ds), BackboneConfig{}, cfg);
        auto dump = team_predict(team, ds, all_ids(ds));
        CHECK(coverage(dump) == doctest::Approx(1.0));
        TriageConfig bad;
        bad.rounds = 0;
        CHECK_THROWS_AS(train_nll_triage(ds, all_ids(ds), BackboneConfig{}, bad),
                        PreconditionError);
    }
}

TEST_SUITE("team_predict") {
    TEST_CASE("boundary identities hold bit-exactly on a 500-instance fixture") {
        Dataset ds = testsupport::tiny_dataset(500, 4, 3, true);
        auto emb = std::make_shared<EmbeddingModel>(quick_embedding(ds, 10));
        std::vector<std::string> ids = all_ids(ds);
        Classification cls = classify(*emb, ds, ids);

        // A == 0 (expertise that never defers): classifier-alone accuracy
        auto exp_never = std::make_shared<ExpertiseModel>();
        exp_never->embedding = emb.get();
        exp_never->degenerate = true;
        exp_never->constant_class = 0;  // p_correct = 0, never above confidence
        TeamModel never = train_confidence_compare(emb, exp_never);
        auto dump0 = team_predict(never, ds, ids);
        double classifier_alone = 0;
        for (std::size_t i = 0; i < ids.size(); ++i)
            classifier_alone += cls.classes[i] == ds.by_id(ids[i]).y;
        classifier_alone /= double(ids.size());
        CHECK(coverage(dump0) == 1.0);
        CHECK(system_accuracy(dump0) == classifier_alone);

        // A == 1 (expertise certain of correctness): expert-alone accuracy
        auto exp_always = std::make_shared<ExpertiseModel>();
        exp_always->embedding = emb.get();
        exp_always->degenerate = true;
        exp_always->constant_class = 1;  // p_correct = 1 > any confidence < 1
        TeamModel always = train_confidence_compare(emb, exp_always);
        auto dump1 = team_predict(always, ds, ids);
        double expert_alone = 0;
        for (const auto& id : ids) expert_alone += ds.by_id(id).h == ds.by_id(id).y;
        expert_alone /= double(ids.size());
        CHECK(coverage(dump1) == 0.0);
        CHECK(system_accuracy(dump1) == expert_alone);

        Boundaries b = boundaries(ds, ids, *emb, &always);
        CHECK(b.classifier_alone == classifier_alone);
        CHECK(b.expert_alone == expert_alone);
        CHECK(b.complete_regime == expert_alone);
    }

    TEST_CASE("missing test expert predictions are rejected") {
        Dataset ds = testsupport::tiny_dataset(20, 2, 3);  // no h
        auto emb = std::make_shared<EmbeddingModel>(quick_embedding(ds, 2));
        auto exp = std::make_shared<ExpertiseModel>();
        exp->embedding = emb.get();
        exp->degenerate = true;
        TeamModel team = train_confidence_compare(emb, exp);
        CHECK_THROWS_AS(team_predict(team, ds, all_ids(ds)), PreconditionError);
        CHECK_THROWS_AS(boundaries(ds, all_ids(ds), *emb), PreconditionError);
    }

    TEST_CASE("prediction dumps round trip with 1-based classes on disk") {
        std::vector<PredictionRow> rows = {{"a", 0, 1, 1, 2, 1}, {"b", 3, 3, 0, 3, 3}};
        auto path = temp_dir("dump") + "/p.tsv";
        save_prediction_dump(rows, path);
        std::ifstream f(path);
        std::string header, line1;
        std::getline(f, header);
        std::getline(f, line1);
        CHECK(line1 == "a\t1\t2\t1\t3\t2");
        auto back = load_prediction_dump(path);
        REQUIRE(back.size() == 2);
        CHECK(back[0].y == 0);
        CHECK(back[1].system_pred == 3);
        CHECK(back[0].deferred == 1);
    }
}

TEST_SUITE("evaluation") {
    TEST_CASE("f_beta matches hand-computed fixtures") {
        // tp=4 fp=1 fn=2 over 10 rows: F0.5 = 1.25*4 / (1.25*4 + 0.25*2 + 1)
        std::vector<int> pred = {1, 1, 1, 1, 1, 0, 0, 0, 0, 0};
        std::vector<int> truth = {1, 1, 1, 1, 0, 1, 1, 0, 0, 0};
        CHECK(f_beta(pred, truth) == doctest::Approx(5.0 / 6.5).epsilon(1e-12));
        // beta=1 reduces to the usual F1
        CHECK(f_beta(pred, truth, 1.0) == doctest::Approx(2.0 * 4.0 / (2.0 * 4.0 + 1.0 + 2.0)));
        // no positive predictions or truths: defined as 0
        CHECK(f_beta({0, 0}, {0, 0}) == 0.0);
        CHECK_THROWS_AS(f_beta({}, {}), PreconditionError);
        CHECK_THROWS_AS(f_beta({1}, {1, 0}), PreconditionError);
    }

    TEST_CASE("f_beta recomputes from its confusion matrix on random inputs") {
        Rng rng = make_rng(31);
        std::uniform_int_distribution<int> coin(0, 1);
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<int> pred(40), truth(40);
            for (int i = 0; i < 40; ++i) {
                pred[std::size_t(i)] = coin(rng);
                truth[std::size_t(i)] = coin(rng);
            }
            double tp = 0, fp = 0, fn = 0;
            for (int i = 0; i < 40; ++i) {
                tp += pred[std::size_t(i)] == 1 && truth[std::size_t(i)] == 1;
                fp += pred[std::size_t(i)] == 1 && truth[std::size_t(i)] == 0;
                fn += pred[std::size_t(i)] == 0 && truth[std::size_t(i)] == 1;
            }
            double denom = 1.25 * tp + 0.25 * fn + fp;
            double expected = denom == 0.0 ? 0.0 : 1.25 * tp / denom;
            CHECK(f_beta(pred, truth) == doctest::Approx(expected).epsilon(1e-12));
        }
    }

    TEST_CASE("system accuracy, coverage and relative performance") {
        std::vector<PredictionRow> dump = {
            {"a", 0, 0, 1, 1, 0}, {"b", 1, 0, 0, 1, 1}, {"c", 2, 2, 0, 0, 0}, {"d", 1, 1, 1, 1, 1}};
        CHECK(system_accuracy(dump) == doctest::Approx(0.75));
        CHECK(coverage(dump) == doctest::Approx(0.5));
        CHECK(relative_performance(0.75, 1.0) == doctest::Approx(75.0));
        CHECK_THROWS_AS(relative_performance(0.5, 0.0), PreconditionError);
        CHECK_THROWS_AS(system_accuracy({}), PreconditionError);
    }

    TEST_CASE("bias report matches a hand-computed 10-row fixture") {
        Dataset ds;
        ds.taxonomy = TaxonomyMap::identity(2);
        ds.payload_dim = 1;
        std::vector<PredictionRow> dump;
        // 5 male (4 correct), 5 female (2 correct); ages 20..29
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
        CHECK(rep.gender_gap == doctest::Approx(0.8 - 0.4).epsilon(1e-12));
        // quintiles of 2 by age: accuracies 0.5, 1.0, 0.5, 0.0, 1.0; overall 0.6
        REQUIRE(rep.age_bin_accuracy.size() == 5);
        CHECK(rep.age_bin_accuracy[0] == doctest::Approx(0.5));
        CHECK(rep.age_bin_accuracy[3] == doctest::Approx(0.0));
        double mad = (0.1 + 0.4 + 0.4 + 0.6 + 0.1) / 5.0;
        CHECK(rep.age_mad == doctest::Approx(mad).epsilon(1e-12));
        CHECK(rep.age_bin_edges.front() == doctest::Approx(20.0));
        CHECK(rep.age_bin_edges.back() == doctest::Approx(29.0));

        ds.by_id("b3").meta.erase("age");
        CHECK_THROWS_WITH_AS(bias_report(dump, ds), doctest::Contains("b3"), MetadataError);
        ds.by_id("b3").meta["age"] = "23";
        ds.by_id("b3").meta["gender"] = "X";
        CHECK_THROWS_AS(bias_report(dump, ds), MetadataError);
    }

    TEST_CASE("metric tables append and aggregate over seeds") {
        auto dir = temp_dir("metrics");
        auto path = dir + "/metrics.tsv";
        MetricRow r;
        r.algorithm = "surrogate";
        r.variant = "nn";
        r.expert = "H";
        r.l = 8;
        r.system_acc = 0.8;
        r.f05 = 0.7;
        r.seed = 1;
        append_metric_rows({r}, path);
        r.seed = 2;
        r.system_acc = 0.9;
        r.f05 = 0.5;
        append_metric_rows({r}, path);
        auto rows = load_metric_rows(path);
        REQUIRE(rows.size() == 2);
        auto agg = aggregate_metrics(rows);
        REQUIRE(agg.size() == 1);
        CHECK(agg[0].n_seeds == 2);
        CHECK(agg[0].mean_acc == doctest::Approx(0.85));
        CHECK(agg[0].std_acc == doctest::Approx(0.05));
        CHECK(agg[0].mean_f05 == doctest::Approx(0.6));
        auto agg_path = dir + "/agg.tsv";
        save_aggregate_table(agg, agg_path);
        CHECK(std::filesystem::exists(agg_path));
    }
}

TEST_SUITE("plot") {
    TEST_CASE("figures are emitted per (expert, algorithm) group") {
        std::vector<AggregateRow> rows;
        for (int l : {8, 24, 80}) {
            AggregateRow a;
            a.algorithm = "surrogate";
            a.variant = "nn";
            a.expert = "H";
            a.l = l;
            a.mean_acc = 0.7 + 0.02 * l / 8.0;
            a.std_acc = 0.02;
            a.classifier_alone = 0.7;
            a.expert_alone = 0.75;
            a.complete_regime = 0.9;
            rows.push_back(a);
            a.algorithm = "nll-triage";
            rows.push_back(a);
        }
        auto dir = temp_dir("figs");
        auto paths = emit_plots(rows, dir);
        CHECK(paths.size() == 2);
        for (const auto& p : paths) {
            std::ifstream f(p);
            std::string body((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
            CHECK(body.find("<svg") != std::string::npos);
            CHECK(body.find("polyline") != std::string::npos);
            CHECK(body.find("</svg>") != std::string::npos);
        }
        CHECK_THROWS_AS(emit_plots({}, dir), PreconditionError);
    }
}

TEST_SUITE("experiment") {
    TEST_CASE("run_pipeline covers the grid and records boundaries") {
        auto dir = temp_dir("pipeline");
        ToyConfig tc;
        tc.k = 3;
        tc.subclasses_per_class = 2;
        tc.n_train = 180;
        tc.n_test = 60;
        tc.payload_dim = 12;
        ToyData toy = make_toy_dataset(tc);
        auto manifest = dir + "/manifest.tsv";
        save_manifest(toy.dataset, manifest);
        save_id_list(toy.test_ids, dir + "/test_ids.txt");

        RunConfig rc;
        rc.manifest_path = manifest;
        rc.output_dir = dir + "/out";
        rc.test_ids_path = dir + "/test_ids.txt";
        rc.budgets_m = {2, 4};
        rc.seeds = {1};
        rc.variants = {"nn", "fixmatch"};
        rc.algorithms = {"surrogate", "confidence-compare"};
        rc.n_strengths = 3;
        rc.embedding_train.epochs = 10;
        rc.ssl.epochs = 3;
        rc.ssl.mu = 2;
        rc.supervised.epochs = 40;
        rc.defer_train.epochs = 8;
        PipelineSummary s = run_pipeline(rc);
        CHECK(s.cells == 8);
        CHECK(s.failures == 0);
        auto rows = load_metric_rows(s.metrics_path);
        CHECK(rows.size() == 8);
        for (const auto& r : rows) {
            CHECK(r.system_acc >= 0.0);
            CHECK(r.system_acc <= 1.0);
            CHECK(r.cov >= 0.0);
            CHECK(r.cov <= 1.0);
            CHECK(r.classifier_alone >= 0.0);
            CHECK(r.expert_alone >= 0.0);
            CHECK(r.complete_regime > 0.0);
            CHECK(r.f05 >= 0.0);
        }
        // embedding cache and expert spec artifacts exist
        CHECK(std::filesystem::exists(dir + "/out/cache"));
        CHECK(std::filesystem::exists(dir + "/out/expert_H_seed1.txt"));
        CHECK(std::filesystem::exists(s.aggregate_path));
        // rerunning appends deterministically equal rows
        PipelineSummary s2 = run_pipeline(rc);
        auto rows2 = load_metric_rows(s2.metrics_path);
        REQUIRE(rows2.size() == 16);
        for (std::size_t i = 0; i < 8; ++i) {
            CHECK(rows2[i + 8].system_acc == rows2[i].system_acc);
            CHECK(rows2[i + 8].f05 == rows2[i].f05);
        }
    }

    TEST_CASE("cell failures are isolated and recorded") {
        auto dir = temp_dir("pipeline_fail");
        ToyConfig tc;
        tc.k = 2;
        tc.subclasses_per_class = 2;
        tc.n_train = 40;
        tc.n_test = 20;
        tc.payload_dim = 8;
        ToyData toy = make_toy_dataset(tc);
        auto manifest = dir + "/manifest.tsv";
        save_manifest(toy.dataset, manifest);
        save_id_list(toy.test_ids, dir + "/test_ids.txt");
        RunConfig rc;
        rc.manifest_path = manifest;
        rc.output_dir = dir + "/out";
        rc.test_ids_path = dir + "/test_ids.txt";
        rc.budgets_m = {2, 1000};  // second budget cannot be satisfied
        rc.seeds = {1};
        rc.variants = {"nn", "bogus-variant"};
        rc.algorithms = {"surrogate"};
        rc.n_strengths = 2;
        rc.embedding_train.epochs = 3;
        rc.supervised.epochs = 10;
        rc.defer_train.epochs = 3;
        PipelineSummary s = run_pipeline(rc);
        CHECK(s.failures == 2);  // bogus variant at m=2, then the m=1000 split
        auto rows = load_metric_rows(s.metrics_path);
        CHECK(rows.size() == 1);  // the viable cell still completed
        std::ifstream f(dir + "/out/failures.tsv");
        std::string body((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        CHECK(body.find("bogus-variant") != std::string::npos);
        CHECK(body.find("split-m1000") != std::string::npos);
    }
}
