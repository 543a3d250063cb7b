// deferkit command-line front end.
//
// Every subcommand reads an optional config file (--config) whose values
// can be overridden with repeated --set section.key=value flags; dedicated
// flags take precedence over both. Relative payload paths resolve against
// DEFERKIT_DATA_ROOT when set.

#include <CLI11.hpp>
#include <iostream>

#include "deferkit/experiment.hpp"

using namespace deferkit;

namespace {

struct Common {
    std::string config_path;
    std::vector<std::string> overrides;

    Config load() const {
        Config cfg = config_path.empty() ? Config{} : Config::from_file(config_path);
        for (const auto& kv : overrides) {
            auto eq = kv.find('=');
            if (eq == std::string::npos)
                throw InputError("--set expects section.key=value, got '" + kv + "'");
            cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
        }
        return cfg;
    }

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config_path, "config file (section.key=value format)");
        cmd->add_option("--set", overrides, "override one config value: section.key=value");
    }
};

ExpertiseModel load_expertise(const std::string& path, const EmbeddingModel* embedding) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open expertise checkpoint: " + path);
    return ExpertiseModel::load(f, embedding);
}

std::shared_ptr<EmbeddingModel> load_embedding(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open embedding checkpoint: " + path);
    return std::make_shared<EmbeddingModel>(EmbeddingModel::load(f));
}

BackboneConfig backbone_from(const Config& c) {
    BackboneConfig b;
    b.feature_dim = c.get_int("backbone.feature_dim", b.feature_dim);
    b.hidden = c.get_int_list("backbone.hidden", b.hidden);
    b.conv_c1 = c.get_int("backbone.conv_c1", b.conv_c1);
    b.conv_c2 = c.get_int("backbone.conv_c2", b.conv_c2);
    return b;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"deferkit: budgeted human-AI deferral pipeline"};
    app.require_subcommand(1);

    // ---- prepare-data ------------------------------------------------
    auto* prep = app.add_subcommand("prepare-data",
                                    "generate a synthetic benchmark manifest or re-split "
                                    "an existing one into train/test id lists");
    Common prep_c;
    prep_c.attach(prep);
    std::string prep_manifest, prep_out_dir = ".";
    bool prep_toy = false;
    prep->add_option("--manifest", prep_manifest, "existing manifest to split");
    prep->add_flag("--toy", prep_toy, "generate the synthetic benchmark instead");
    prep->add_option("--out-dir", prep_out_dir, "output directory");

    // ---- gen-expert ---------------------------------------------------
    auto* genx = app.add_subcommand("gen-expert",
                                    "sample a synthetic expert from embedding-feature "
                                    "similarities and save its spec");
    Common genx_c;
    genx_c.attach(genx);
    std::string genx_manifest, genx_embedding, genx_train_ids, genx_out = "expert.txt";
    std::string genx_materialize;
    int genx_strengths = 30;
    std::uint64_t genx_seed = 0;
    genx->add_option("--manifest", genx_manifest)->required();
    genx->add_option("--embedding", genx_embedding, "embedding checkpoint")->required();
    genx->add_option("--train-ids", genx_train_ids, "id list used for the similarity matrix")
        ->required();
    genx->add_option("--n-strengths", genx_strengths);
    genx->add_option("--seed", genx_seed);
    genx->add_option("--out", genx_out, "expert spec output path");
    genx->add_option("--materialize", genx_materialize,
                     "also write a manifest copy with the expert column filled");

    // ---- train-embedding ----------------------------------------------
    auto* temb = app.add_subcommand("train-embedding",
                                    "train the embedding model on ground-truth labels");
    Common temb_c;
    temb_c.attach(temb);
    std::string temb_manifest, temb_ids, temb_out = "embedding.ckpt";
    std::uint64_t temb_seed = 0;
    temb->add_option("--manifest", temb_manifest)->required();
    temb->add_option("--ids", temb_ids, "train id list (default: all rows)");
    temb->add_option("--seed", temb_seed);
    temb->add_option("--out", temb_out);

    // ---- train-expertise ----------------------------------------------
    auto* texp = app.add_subcommand("train-expertise",
                                    "train an expertise predictor on binarized expert "
                                    "correctness labels");
    Common texp_c;
    texp_c.attach(texp);
    std::string texp_manifest, texp_embedding, texp_l, texp_u, texp_variant = "comatch";
    std::string texp_out = "expertise.ckpt";
    std::uint64_t texp_seed = 0;
    texp->add_option("--manifest", texp_manifest)->required();
    texp->add_option("--labeled-ids", texp_l)->required();
    texp->add_option("--unlabeled-ids", texp_u, "required for the semi-supervised variants");
    texp->add_option("--embedding", texp_embedding,
                     "embedding checkpoint (omit only for raw-* variants)");
    texp->add_option("--variant", texp_variant,
                     "fixmatch | comatch | nn | svm | raw-fixmatch | raw-comatch");
    texp->add_option("--seed", texp_seed);
    texp->add_option("--out", texp_out);

    // ---- gen-labels ----------------------------------------------------
    auto* genl = app.add_subcommand("gen-labels",
                                    "complete the dataset: artificial expert predictions "
                                    "for every unlabeled instance");
    Common genl_c;
    genl_c.attach(genl);
    std::string genl_manifest, genl_embedding, genl_expertise, genl_l, genl_u;
    std::string genl_out = "completed.tsv";
    std::uint64_t genl_seed = 0;
    genl->add_option("--manifest", genl_manifest)->required();
    genl->add_option("--labeled-ids", genl_l)->required();
    genl->add_option("--unlabeled-ids", genl_u)->required();
    genl->add_option("--embedding", genl_embedding, "omit for raw-* expertise checkpoints");
    genl->add_option("--expertise", genl_expertise)->required();
    genl->add_option("--seed", genl_seed);
    genl->add_option("--out", genl_out, "completed manifest output path");

    // ---- train-defer -----------------------------------------------------
    auto* tdef = app.add_subcommand("train-defer",
                                    "train a deferral algorithm on a completed manifest "
                                    "and dump test predictions");
    Common tdef_c;
    tdef_c.attach(tdef);
    std::string tdef_manifest, tdef_test_manifest, tdef_test_ids, tdef_algorithm = "surrogate";
    std::string tdef_embedding, tdef_expertise, tdef_out = "predictions.tsv";
    std::uint64_t tdef_seed = 0;
    tdef->add_option("--manifest", tdef_manifest, "completed train manifest")->required();
    tdef->add_option("--test-manifest", tdef_test_manifest,
                     "manifest holding the test rows (default: the train manifest)");
    tdef->add_option("--test-ids", tdef_test_ids)->required();
    tdef->add_option("--algorithm", tdef_algorithm, "surrogate | confidence-compare | nll-triage");
    tdef->add_option("--embedding", tdef_embedding,
                     "required for confidence-compare and nll-triage");
    tdef->add_option("--expertise", tdef_expertise,
                     "required for confidence-compare and nll-triage");
    tdef->add_option("--seed", tdef_seed);
    tdef->add_option("--out", tdef_out, "prediction dump output path");

    // ---- evaluate ---------------------------------------------------------
    auto* eval = app.add_subcommand("evaluate", "metrics for a stored prediction dump");
    Common eval_c;
    eval_c.attach(eval);
    std::string eval_dump, eval_manifest;
    bool eval_bias = false;
    eval->add_option("--predictions", eval_dump)->required();
    eval->add_option("--manifest", eval_manifest, "needed for subgroup bias metrics");
    eval->add_flag("--bias", eval_bias, "also report gender/age subgroup disparities");

    // ---- plot ---------------------------------------------------------------
    auto* plot = app.add_subcommand("plot", "aggregate a metric table and emit SVG figures");
    Common plot_c;
    plot_c.attach(plot);
    std::string plot_metrics, plot_out = "figures";
    plot->add_option("--metrics", plot_metrics, "metrics.tsv from run-all")->required();
    plot->add_option("--out-dir", plot_out);

    // ---- run-all ------------------------------------------------------------
    auto* runall = app.add_subcommand("run-all", "full grid: every budget, seed, variant "
                                                 "and deferral algorithm");
    Common runall_c;
    runall_c.attach(runall);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*prep) {
            Config cfg = prep_c.load();
            std::filesystem::create_directories(prep_out_dir);
            if (prep_toy) {
                ToyConfig tc;
                tc.k = cfg.get_int("toy.k", tc.k);
                tc.subclasses_per_class = cfg.get_int("toy.subclasses_per_class",
                                                      tc.subclasses_per_class);
                tc.n_train = cfg.get_int("toy.n_train", tc.n_train);
                tc.n_test = cfg.get_int("toy.n_test", tc.n_test);
                tc.latent_dim = cfg.get_int("toy.latent_dim", tc.latent_dim);
                tc.payload_dim = cfg.get_int("toy.payload_dim", tc.payload_dim);
                tc.noise = cfg.get_double("toy.noise", tc.noise);
                tc.with_meta = cfg.get_bool("toy.with_meta", tc.with_meta);
                tc.images = cfg.get_bool("toy.images", tc.images);
                tc.seed = std::uint64_t(cfg.get_int("toy.seed", 0));
                ToyData toy = make_toy_dataset(tc);
                save_manifest(toy.dataset,
                              (std::filesystem::path(prep_out_dir) / "manifest.tsv").string());
                save_id_list(toy.train_ids,
                             (std::filesystem::path(prep_out_dir) / "train_ids.txt").string());
                save_id_list(toy.test_ids,
                             (std::filesystem::path(prep_out_dir) / "test_ids.txt").string());
            } else {
                if (prep_manifest.empty())
                    throw InputError("prepare-data needs --manifest or --toy");
                Dataset ds = load_manifest(prep_manifest);
                std::optional<std::string> gk;
                std::string g = cfg.get("data.group_key", "");
                if (!g.empty()) gk = g;
                auto [train, test] = split_train_test(
                    ds, cfg.get_double("data.test_fraction", 0.2), gk,
                    std::uint64_t(cfg.get_int("data.split_seed", 0)));
                save_id_list(train,
                             (std::filesystem::path(prep_out_dir) / "train_ids.txt").string());
                save_id_list(test,
                             (std::filesystem::path(prep_out_dir) / "test_ids.txt").string());
            }
            std::cout << "wrote data artifacts to " << prep_out_dir << "\n";
        } else if (*genx) {
            Dataset ds = load_manifest(genx_manifest);
            auto embedding = load_embedding(genx_embedding);
            auto train_ids = load_id_list(genx_train_ids);
            Matrix feats = extract_features(*embedding, ds, train_ids);
            std::vector<int> subs;
            for (const auto& id : train_ids) {
                int ys = ds.by_id(id).y_sub;
                if (ys < 0) throw MetadataError("gen-expert: id " + id + " lacks y_sub");
                subs.push_back(ys);
            }
            Matrix sim = build_similarity_matrix(feats, subs, ds.k_sub());
            SyntheticExpert expert =
                sample_strength_set(sim, ds.taxonomy, genx_strengths, genx_seed);
            expert.save(genx_out);
            std::cout << "expert spec: " << genx_out << " (base subclass " << expert.base + 1
                      << ", " << expert.strengths.size() << " strengths)\n";
            if (!genx_materialize.empty()) {
                materialize_expert_predictions(ds, expert, all_ids(ds));
                save_manifest(ds, genx_materialize);
                std::cout << "materialized manifest: " << genx_materialize << "\n";
            }
        } else if (*temb) {
            Config cfg = temb_c.load();
            Dataset ds = load_manifest(temb_manifest);
            TrainConfig tc;
            tc.epochs = cfg.get_int("embedding.epochs", tc.epochs);
            tc.lr = cfg.get_double("embedding.lr", tc.lr);
            tc.batch_size = cfg.get_int("embedding.batch_size", tc.batch_size);
            tc.seed = temb_seed;
            auto ids = temb_ids.empty() ? all_ids(ds) : load_id_list(temb_ids);
            EmbeddingModel model = train_embedding(ds, ids, backbone_from(cfg), tc);
            std::ofstream f(temb_out);
            model.save(f);
            std::cout << "embedding checkpoint: " << temb_out << " (final loss "
                      << model.loss_trajectory.back() << ")\n";
        } else if (*texp) {
            Config cfg = texp_c.load();
            Dataset ds = load_manifest(texp_manifest);
            auto l_ids = load_id_list(texp_l);
            std::vector<std::string> u_ids;
            if (!texp_u.empty()) u_ids = load_id_list(texp_u);
            std::shared_ptr<EmbeddingModel> embedding;
            if (!texp_embedding.empty()) embedding = load_embedding(texp_embedding);
            bool raw = texp_variant.rfind("raw-", 0) == 0;
            if (!raw && !embedding)
                throw InputError("variant '" + texp_variant + "' requires --embedding");
            SSLConfig ssl;
            ssl.tau = cfg.get_double("ssl.tau", ssl.tau);
            ssl.lambda_u = cfg.get_double("ssl.lambda_u", ssl.lambda_u);
            ssl.lambda_c = cfg.get_double("ssl.lambda_c", ssl.lambda_c);
            ssl.mu = cfg.get_int("ssl.mu", ssl.mu);
            ssl.epochs = cfg.get_int("ssl.epochs", ssl.epochs);
            ssl.lr = cfg.get_double("ssl.lr", ssl.lr);
            SupervisedConfig sup;
            sup.epochs = cfg.get_int("supervised.epochs", sup.epochs);
            sup.lr = cfg.get_double("supervised.lr", sup.lr);
            AugmentationPolicy policy = AugmentationPolicy::for_dataset(ds);
            ExpertiseModel model = train_expertise_variant(
                texp_variant, ds, l_ids, u_ids, embedding.get(), backbone_from(cfg), policy, ssl,
                sup, texp_seed);
            std::ofstream f(texp_out);
            model.save(f);
            std::cout << "expertise checkpoint: " << texp_out << "\n";
        } else if (*genl) {
            Dataset ds = load_manifest(genl_manifest);
            std::shared_ptr<EmbeddingModel> embedding;
            if (!genl_embedding.empty()) embedding = load_embedding(genl_embedding);
            ExpertiseModel model = load_expertise(genl_expertise, embedding.get());
            Dataset completed = complete_dataset(ds, load_id_list(genl_l), load_id_list(genl_u),
                                                 model, genl_seed);
            save_manifest(completed, genl_out);
            std::cout << "completed manifest: " << genl_out << " (" << completed.size()
                      << " rows)\n";
        } else if (*tdef) {
            Config cfg = tdef_c.load();
            Dataset ds = load_manifest(tdef_manifest);
            Dataset test_ds = tdef_test_manifest.empty() ? ds : load_manifest(tdef_test_manifest);
            auto test_ids = load_id_list(tdef_test_ids);
            std::shared_ptr<EmbeddingModel> embedding;
            std::shared_ptr<ExpertiseModel> expertise;
            if (!tdef_embedding.empty()) embedding = load_embedding(tdef_embedding);
            if (!tdef_expertise.empty())
                expertise = std::make_shared<ExpertiseModel>(
                    load_expertise(tdef_expertise, embedding.get()));
            if ((tdef_algorithm == "confidence-compare" || tdef_algorithm == "nll-triage") &&
                (!embedding || !expertise))
                throw InputError(tdef_algorithm + " requires --embedding and --expertise");
            TrainConfig tc;
            tc.epochs = cfg.get_int("defer.epochs", 30);
            tc.lr = cfg.get_double("defer.lr", 0.05);
            tc.batch_size = cfg.get_int("defer.batch_size", 64);
            tc.seed = tdef_seed;
            TeamModel team = train_defer_algorithm(tdef_algorithm, ds, all_ids(ds), embedding,
                                                   expertise, backbone_from(cfg), tc,
                                                   cfg.get_int("defer.triage_rounds", 3),
                                                   tdef_seed);
            auto dump = team_predict(team, test_ds, test_ids);
            save_prediction_dump(dump, tdef_out);
            std::cout << "predictions: " << tdef_out << " (system accuracy "
                      << system_accuracy(dump) << ", coverage " << coverage(dump) << ")\n";
        } else if (*eval) {
            auto dump = load_prediction_dump(eval_dump);
            std::cout << "system_accuracy\t" << system_accuracy(dump) << "\n";
            std::cout << "coverage\t" << coverage(dump) << "\n";
            std::vector<int> pred, truth;
            for (const auto& r : dump) {
                pred.push_back(r.deferred);
                truth.push_back(r.h == r.y ? 1 : 0);
            }
            std::cout << "deferral_f05\t" << f_beta(pred, truth) << "\n";
            if (eval_bias) {
                if (eval_manifest.empty()) throw InputError("--bias requires --manifest");
                BiasReport bias = bias_report(dump, load_manifest(eval_manifest));
                std::cout << "gender_gap\t" << bias.gender_gap << "\n";
                std::cout << "age_mad\t" << bias.age_mad << "\n";
                for (std::size_t b = 0; b < bias.age_bin_accuracy.size(); ++b)
                    std::cout << "age_bin_" << b + 1 << "_acc\t" << bias.age_bin_accuracy[b]
                              << "\n";
            }
        } else if (*plot) {
            auto aggregates = aggregate_metrics(load_metric_rows(plot_metrics));
            auto paths = emit_plots(aggregates, plot_out);
            for (const auto& p : paths) std::cout << "figure: " << p << "\n";
        } else if (*runall) {
            RunConfig rc = RunConfig::from_config(runall_c.load());
            PipelineSummary s = run_pipeline(rc);
            std::cout << "grid cells: " << s.cells << ", failures: " << s.failures << "\n";
            std::cout << "metrics: " << s.metrics_path << "\n";
            std::cout << "aggregates: " << s.aggregate_path << "\n";
            if (s.failures > 0) {
                std::cerr << "some grid cells failed; see failures.tsv in the output dir\n";
                return 1;
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
