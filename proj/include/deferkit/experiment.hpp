#pragma once

// End-to-end grid runner: for every (expert, budget, seed, expertise
// variant, deferral algorithm) cell it trains or reuses the embedding,
// trains the expertise predictor, completes the dataset with artificial
// expert predictions, trains the deferral model, and appends metric rows.
// Cell failures are recorded and do not abort the grid.

#include <iostream>

#include "deferkit/artificial.hpp"
#include "deferkit/config.hpp"
#include "deferkit/defer.hpp"
#include "deferkit/evaluation.hpp"
#include "deferkit/plot.hpp"
#include "deferkit/synthetic_expert.hpp"
#include "deferkit/toygen.hpp"

namespace deferkit {

struct RunConfig {
    std::string manifest_path;
    std::string output_dir = "runs/out";
    double test_fraction = 0.2;
    std::string group_key;        // e.g. patient_id; empty = ungrouped split
    std::string test_ids_path;    // explicit test split overrides test_fraction

    // expert source: a synthetic expert sampled per seed, a stored expert
    // spec, or a real expert column already present in the manifest
    std::string expert_mode = "synthetic";  // synthetic | spec | column
    std::string expert_spec_path;
    int n_strengths = 30;
    std::string expert_name = "H";

    std::vector<int> budgets_m = {2, 4, 6, 10, 20, 50};
    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
    std::vector<std::string> variants = {"fixmatch", "comatch", "nn", "svm"};
    std::vector<std::string> algorithms = {"surrogate", "confidence-compare", "nll-triage"};
    bool include_complete = true;

    BackboneConfig backbone;
    TrainConfig embedding_train{60, 0.1, 0.9, true, 64, 0};
    SSLConfig ssl;
    SupervisedConfig supervised;
    TrainConfig defer_train{30, 0.05, 0.9, true, 64, 0};
    int triage_rounds = 3;

    std::string fingerprint;

    static RunConfig from_config(const Config& c) {
        RunConfig r;
        r.manifest_path = c.get("data.manifest", r.manifest_path);
        r.output_dir = c.get("run.output_dir", r.output_dir);
        r.test_fraction = c.get_double("data.test_fraction", r.test_fraction);
        r.group_key = c.get("data.group_key", r.group_key);
        r.test_ids_path = c.get("data.test_ids", r.test_ids_path);
        r.expert_mode = c.get("expert.mode", r.expert_mode);
        r.expert_spec_path = c.get("expert.spec", r.expert_spec_path);
        r.n_strengths = c.get_int("expert.n_strengths", r.n_strengths);
        r.expert_name = c.get("expert.name", r.expert_name);
        r.budgets_m = c.get_int_list("run.budgets_m", r.budgets_m);
        auto seed_list = c.get_int_list("run.seeds", {});
        if (!seed_list.empty()) {
            r.seeds.clear();
            for (int s : seed_list) r.seeds.push_back(std::uint64_t(s));
        }
        r.variants = c.get_list("run.variants", r.variants);
        r.algorithms = c.get_list("run.algorithms", r.algorithms);
        r.include_complete = c.get_bool("run.include_complete", r.include_complete);

        r.backbone.feature_dim = c.get_int("backbone.feature_dim", r.backbone.feature_dim);
        r.backbone.hidden = c.get_int_list("backbone.hidden", r.backbone.hidden);
        r.backbone.conv_c1 = c.get_int("backbone.conv_c1", r.backbone.conv_c1);
        r.backbone.conv_c2 = c.get_int("backbone.conv_c2", r.backbone.conv_c2);

        r.embedding_train.epochs = c.get_int("embedding.epochs", r.embedding_train.epochs);
        r.embedding_train.lr = c.get_double("embedding.lr", r.embedding_train.lr);
        r.embedding_train.batch_size = c.get_int("embedding.batch_size",
                                                 r.embedding_train.batch_size);

        r.ssl.tau = c.get_double("ssl.tau", r.ssl.tau);
        r.ssl.lambda_u = c.get_double("ssl.lambda_u", r.ssl.lambda_u);
        r.ssl.lambda_c = c.get_double("ssl.lambda_c", r.ssl.lambda_c);
        r.ssl.mu = c.get_int("ssl.mu", r.ssl.mu);
        r.ssl.epochs = c.get_int("ssl.epochs", r.ssl.epochs);
        r.ssl.lr = c.get_double("ssl.lr", r.ssl.lr);
        r.ssl.batch_size = c.get_int("ssl.batch_size", r.ssl.batch_size);
        r.ssl.memory_size = c.get_int("ssl.memory_size", r.ssl.memory_size);
        r.ssl.smoothing = c.get_double("ssl.smoothing", r.ssl.smoothing);
        r.ssl.proj_dim = c.get_int("ssl.proj_dim", r.ssl.proj_dim);
        r.ssl.graph_threshold = c.get_double("ssl.graph_threshold", r.ssl.graph_threshold);

        r.supervised.epochs = c.get_int("supervised.epochs", r.supervised.epochs);
        r.supervised.lr = c.get_double("supervised.lr", r.supervised.lr);

        r.defer_train.epochs = c.get_int("defer.epochs", r.defer_train.epochs);
        r.defer_train.lr = c.get_double("defer.lr", r.defer_train.lr);
        r.defer_train.batch_size = c.get_int("defer.batch_size", r.defer_train.batch_size);
        r.triage_rounds = c.get_int("defer.triage_rounds", r.triage_rounds);

        r.fingerprint = c.fingerprint();
        return r;
    }
};

namespace detail {

inline std::string cache_key(const std::string& dataset_tag, const BackboneConfig& bcfg,
                             std::uint64_t seed) {
    std::ostringstream os;
    os << std::hex
       << hash_combine(hash_combine(fnv1a64(dataset_tag), bcfg.fingerprint()), seed);
    return os.str();
}

}  // namespace detail

/// Embedding cache keyed on (dataset tag, backbone config, seed): a new
/// budget never retrains the embedding.
inline std::shared_ptr<EmbeddingModel> train_or_load_embedding(
    const Dataset& ds, const std::vector<std::string>& train_ids, const std::string& dataset_tag,
    const BackboneConfig& bcfg, TrainConfig tcfg, std::uint64_t seed,
    const std::string& cache_dir) {
    tcfg.seed = seed;
    std::string path;
    if (!cache_dir.empty()) {
        std::filesystem::create_directories(cache_dir);
        path = (std::filesystem::path(cache_dir) /
                ("embedding_" + detail::cache_key(dataset_tag, bcfg, seed) + ".ckpt"))
                   .string();
        if (std::filesystem::exists(path)) {
            std::ifstream f(path);
            return std::make_shared<EmbeddingModel>(EmbeddingModel::load(f));
        }
    }
    auto model = std::make_shared<EmbeddingModel>(train_embedding(ds, train_ids, bcfg, tcfg));
    if (!path.empty()) {
        std::ofstream f(path);
        model->save(f);
    }
    return model;
}

/// Trains one expertise predictor variant. Known variants: fixmatch,
/// comatch, nn, svm (on the frozen embedding) and raw-fixmatch,
/// raw-comatch (no embedding, trainable backbone).
inline ExpertiseModel train_expertise_variant(
    const std::string& variant, const Dataset& ds, const std::vector<std::string>& l_ids,
    const std::vector<std::string>& u_ids, const EmbeddingModel* embedding,
    const BackboneConfig& bcfg, const AugmentationPolicy& policy, SSLConfig ssl,
    SupervisedConfig sup, std::uint64_t seed) {
    ssl.seed = seed;
    sup.seed = seed;
    if (variant == "fixmatch")
        return train_fixmatch(ds, l_ids, u_ids, embedding, bcfg, policy, ssl);
    if (variant == "comatch")
        return train_comatch(ds, l_ids, u_ids, embedding, bcfg, policy, ssl);
    if (variant == "raw-fixmatch")
        return train_fixmatch(ds, l_ids, u_ids, nullptr, bcfg, policy, ssl);
    if (variant == "raw-comatch")
        return train_comatch(ds, l_ids, u_ids, nullptr, bcfg, policy, ssl);
    if (variant == "nn")
        return train_supervised_head(ds, l_ids, *embedding,
                                     SupervisedVariant::single_layer_softmax, sup);
    if (variant == "svm")
        return train_supervised_head(ds, l_ids, *embedding, SupervisedVariant::max_margin_linear,
                                     sup);
    throw PreconditionError("unknown expertise variant: " + variant);
}

inline TeamModel train_defer_algorithm(const std::string& algorithm, const Dataset& completed,
                                       const std::vector<std::string>& train_ids,
                                       std::shared_ptr<const EmbeddingModel> embedding,
                                       std::shared_ptr<const ExpertiseModel> expertise,
                                       const BackboneConfig& bcfg, TrainConfig tcfg,
                                       int triage_rounds, std::uint64_t seed) {
    tcfg.seed = seed;
    if (algorithm == "surrogate") return train_surrogate(completed, train_ids, bcfg, tcfg);
    if (algorithm == "confidence-compare")
        return train_confidence_compare(std::move(embedding), std::move(expertise));
    if (algorithm == "nll-triage") {
        TriageConfig tc;
        tc.rounds = triage_rounds;
        tc.classifier = tcfg;
        // the triage classifier refits every round; spread the epoch budget
        // so the total matches the single-shot algorithms and the per-round
        // refit does not overfit the instances it has kept
        tc.classifier.epochs = std::max(1, tcfg.epochs / std::max(1, triage_rounds));
        tc.defer_predictor = tcfg;
        return train_nll_triage(completed, train_ids, bcfg, tc);
    }
    throw PreconditionError("unknown deferral algorithm: " + algorithm);
}

struct PipelineSummary {
    int cells = 0;
    int failures = 0;
    std::string metrics_path;
    std::string aggregate_path;
};

/// Full grid over (budget, seed, variant, algorithm) for one dataset and
/// one expert. The dataset must carry true expert predictions on every
/// train/test row (materialized synthetic expert or a real expert column);
/// budgeted runs only expose them on L.
inline PipelineSummary run_pipeline(const RunConfig& cfg) {
    std::filesystem::create_directories(cfg.output_dir);
    {
        std::ofstream fp(std::filesystem::path(cfg.output_dir) / "config_fingerprint.txt");
        fp << cfg.fingerprint << "\n";
    }
    std::string cache_dir = (std::filesystem::path(cfg.output_dir) / "cache").string();
    std::string pred_dir = (std::filesystem::path(cfg.output_dir) / "predictions").string();
    std::filesystem::create_directories(pred_dir);
    PipelineSummary summary;
    summary.metrics_path = (std::filesystem::path(cfg.output_dir) / "metrics.tsv").string();
    summary.aggregate_path = (std::filesystem::path(cfg.output_dir) / "aggregates.tsv").string();
    std::ofstream failure_log(std::filesystem::path(cfg.output_dir) / "failures.tsv",
                              std::ios::app);

    Dataset ds = load_manifest(cfg.manifest_path);
    std::vector<std::string> train_ids, test_ids;
    if (!cfg.test_ids_path.empty()) {
        test_ids = load_id_list(cfg.test_ids_path);
        std::unordered_set<std::string> test_set(test_ids.begin(), test_ids.end());
        for (const auto& ex : ds.examples)
            if (!test_set.count(ex.id)) train_ids.push_back(ex.id);
    } else {
        std::optional<std::string> gk;
        if (!cfg.group_key.empty()) gk = cfg.group_key;
        std::tie(train_ids, test_ids) = split_train_test(ds, cfg.test_fraction, gk, cfg.seeds[0]);
    }
    save_id_list(train_ids, (std::filesystem::path(cfg.output_dir) / "train_ids.txt").string());
    save_id_list(test_ids, (std::filesystem::path(cfg.output_dir) / "test_ids.txt").string());

    std::string dataset_tag = cfg.manifest_path + ":" + std::to_string(ds.size());
    AugmentationPolicy policy = AugmentationPolicy::for_dataset(ds);

    for (std::uint64_t seed : cfg.seeds) {
        auto embedding = train_or_load_embedding(ds, train_ids, dataset_tag, cfg.backbone,
                                                 cfg.embedding_train, seed, cache_dir);

        // expert predictions for every row (ground truth for the budget game)
        Dataset ds_full = ds;  // copy; expert column differs per seed
        if (cfg.expert_mode == "synthetic") {
            Matrix feats = extract_features(*embedding, ds_full, train_ids);
            std::vector<int> subs;
            for (const auto& id : train_ids) {
                int ys = ds_full.by_id(id).y_sub;
                if (ys < 0) throw MetadataError("synthetic expert requires y_sub on id " + id);
                subs.push_back(ys);
            }
            Matrix sim = build_similarity_matrix(feats, subs, ds_full.k_sub());
            SyntheticExpert expert = sample_strength_set(sim, ds_full.taxonomy, cfg.n_strengths,
                                                         hash_combine(seed, cfg.expert_name));
            expert.save((std::filesystem::path(cfg.output_dir) /
                         ("expert_" + cfg.expert_name + "_seed" + std::to_string(seed) + ".txt"))
                            .string());
            materialize_expert_predictions(ds_full, expert, train_ids);
            materialize_expert_predictions(ds_full, expert, test_ids);
        } else if (cfg.expert_mode == "spec") {
            SyntheticExpert expert = SyntheticExpert::load(cfg.expert_spec_path);
            materialize_expert_predictions(ds_full, expert, train_ids);
            materialize_expert_predictions(ds_full, expert, test_ids);
        } else if (cfg.expert_mode == "column") {
            for (const auto* ids : {&train_ids, &test_ids})
                for (const auto& id : *ids)
                    if (!ds_full.by_id(id).has_expert())
                        throw PreconditionError("expert mode 'column' requires h on id " + id);
        } else {
            throw PreconditionError("unknown expert mode: " + cfg.expert_mode);
        }

        Boundaries bounds = boundaries(ds_full, test_ids, *embedding);

        // complete-regime upper boundary per algorithm
        std::map<std::string, double> complete_acc;
        std::shared_ptr<ExpertiseModel> complete_expertise;
        if (cfg.include_complete) {
            // every train row is real-labeled: the expertise input is exact
            Dataset complete_ds = ds_full;
            for (const auto& id : train_ids) complete_ds.by_id(id).h_source = "real";
            complete_expertise = std::make_shared<ExpertiseModel>(train_expertise_variant(
                "nn", complete_ds, train_ids, {}, embedding.get(), cfg.backbone, policy, cfg.ssl,
                cfg.supervised, seed));
            for (const auto& algorithm : cfg.algorithms) {
                try {
                    TeamModel team = train_defer_algorithm(
                        algorithm, complete_ds, train_ids, embedding, complete_expertise,
                        cfg.backbone, cfg.defer_train, cfg.triage_rounds, seed);
                    complete_acc[algorithm] =
                        system_accuracy(team_predict(team, ds_full, test_ids));
                } catch (const std::exception& e) {
                    failure_log << "complete\t" << algorithm << "\t" << seed << "\t" << e.what()
                                << "\t" << cfg.fingerprint << "\n";
                    ++summary.failures;
                }
            }
        }

        for (int m : cfg.budgets_m) {
            DatasetSplit split;
            try {
                split = sample_labeled_subset(ds_full, train_ids, m, hash_combine(seed, m));
            } catch (const std::exception& e) {
                failure_log << "split-m" << m << "\t-\t" << seed << "\t" << e.what() << "\t"
                            << cfg.fingerprint << "\n";
                ++summary.failures;
                continue;
            }
            split.test_ids = test_ids;

            // true binary labels on U, for the F0.5 of artificial predictions
            std::vector<int> u_truth;
            for (const auto& id : split.unlabeled_ids) {
                const Example& ex = ds_full.by_id(id);
                u_truth.push_back(binarize(ex.h, ex.y, ds_full.k()));
            }

            for (const auto& variant : cfg.variants) {
                std::shared_ptr<ExpertiseModel> expertise;
                double f05 = -1.0;
                Dataset completed;
                try {
                    expertise = std::make_shared<ExpertiseModel>(train_expertise_variant(
                        variant, ds_full, split.labeled_ids, split.unlabeled_ids, embedding.get(),
                        cfg.backbone, policy, cfg.ssl, cfg.supervised, seed));
                    completed = complete_dataset(ds_full, split.labeled_ids, split.unlabeled_ids,
                                                 *expertise, hash_combine(seed, variant));
                    if (!split.unlabeled_ids.empty()) {
                        std::vector<int> u_pred;
                        for (const auto& id : split.unlabeled_ids)
                            u_pred.push_back(completed.by_id(id).h_bin_hat);
                        f05 = f_beta(u_pred, u_truth);
                    }
                } catch (const std::exception& e) {
                    failure_log << "expertise-" << variant << "-m" << m << "\t-\t" << seed << "\t"
                                << e.what() << "\t" << cfg.fingerprint << "\n";
                    ++summary.failures;
                    continue;
                }

                std::vector<std::string> completed_train = all_ids(completed);
                for (const auto& algorithm : cfg.algorithms) {
                    ++summary.cells;
                    try {
                        TeamModel team = train_defer_algorithm(
                            algorithm, completed, completed_train, embedding, expertise,
                            cfg.backbone, cfg.defer_train, cfg.triage_rounds, seed);
                        auto dump = team_predict(team, ds_full, test_ids);
                        std::string dump_name = cfg.expert_name + "_" + variant + "_" + algorithm +
                                                "_m" + std::to_string(m) + "_seed" +
                                                std::to_string(seed) + ".tsv";
                        save_prediction_dump(dump,
                                             (std::filesystem::path(pred_dir) / dump_name).string());
                        MetricRow row;
                        row.algorithm = algorithm;
                        row.variant = variant;
                        row.expert = cfg.expert_name;
                        row.l = m * ds_full.k();
                        row.seed = seed;
                        row.system_acc = system_accuracy(dump);
                        row.cov = coverage(dump);
                        row.f05 = f05;
                        row.classifier_alone = bounds.classifier_alone;
                        row.expert_alone = bounds.expert_alone;
                        if (auto it = complete_acc.find(algorithm); it != complete_acc.end()) {
                            row.complete_regime = it->second;
                            row.relative = relative_performance(row.system_acc, it->second);
                        }
                        bool has_meta = !ds_full.examples.empty() &&
                                        ds_full.examples[0].meta.count("gender") > 0 &&
                                        ds_full.examples[0].meta.count("age") > 0;
                        if (has_meta) {
                            BiasReport bias = bias_report(dump, ds_full);
                            row.gender_gap = bias.gender_gap;
                            row.age_mad = bias.age_mad;
                        }
                        append_metric_rows({row}, summary.metrics_path);
                    } catch (const std::exception& e) {
                        failure_log << algorithm << "-" << variant << "-m" << m << "\t-\t" << seed
                                    << "\t" << e.what() << "\t" << cfg.fingerprint << "\n";
                        ++summary.failures;
                    }
                }
            }
        }
    }

    if (std::filesystem::exists(summary.metrics_path)) {
        auto aggregates = aggregate_metrics(load_metric_rows(summary.metrics_path));
        save_aggregate_table(aggregates, summary.aggregate_path);
    }
    return summary;
}

}  // namespace deferkit
