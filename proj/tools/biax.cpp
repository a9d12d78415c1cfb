// biax command-line harness: train, eval-fewshot, predict, gen-tables.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "biax/biax.hpp"

namespace {

using namespace biax;

template <class E>
CLI::Option* add_enum(CLI::App* app, const std::string& name, E& target, const std::map<std::string, E>& values,
                      const std::string& help) {
    return app->add_option(name, target, help)->transform(CLI::CheckedTransformer(values, CLI::ignore_case));
}

void add_model_options(CLI::App* app, ModelConfig& m) {
    app->add_option("--dim", m.dim, "Cell embedding width D")->capture_default_str();
    app->add_option("--n-cls", m.n_cls, "CLS tokens per row")->capture_default_str();
    add_enum(app, "--col-attention", m.col_attention,
             {{"induced", SetAttention::induced}, {"linear", SetAttention::linear}}, "Column set attention");
    app->add_option("--col-blocks", m.col_blocks, "Column embedder blocks")->capture_default_str();
    app->add_option("--inducing-points", m.inducing_points, "Inducing points per set block")->capture_default_str();
    app->add_option("--col-heads", m.col_heads, "Column attention heads")->capture_default_str();
    app->add_option("--groups", m.groups, "Feature groups in the row encoder")->capture_default_str();
    app->add_option("--row-blocks", m.row_blocks, "Biaxial row encoder blocks")->capture_default_str();
    app->add_option("--row-heads", m.row_heads, "Row attention heads")->capture_default_str();
    app->add_option("--ff-mult", m.ff_mult, "Feed-forward width multiplier")->capture_default_str();
    app->add_option("--icl-blocks", m.icl_blocks, "In-context learner blocks")->capture_default_str();
    app->add_option("--icl-heads", m.icl_heads, "In-context learner heads")->capture_default_str();
    add_enum(app, "--icl-attention", m.icl_attention,
             {{"softmax", IclAttention::softmax}, {"linear", IclAttention::linear}}, "In-context attention kind");
    app->add_option("--max-classes", m.max_classes, "Classes the decoder emits (C_max)")->capture_default_str();
    app->add_option("--model-seed", m.seed, "Parameter initialization seed")->capture_default_str();
}

void add_prior_options(CLI::App* app, PriorConfig& p) {
    app->add_option("--rows-min", p.n_min, "Rows per table, lower bound")->capture_default_str();
    app->add_option("--rows-max", p.n_max, "Rows per table, upper bound")->capture_default_str();
    app->add_option("--features-min", p.m_min, "Features per table, lower bound")->capture_default_str();
    app->add_option("--features-max", p.m_max, "Features per table, upper bound")->capture_default_str();
    app->add_option("--classes-min", p.c_min, "Classes per table, lower bound")->capture_default_str();
    app->add_option("--classes-max", p.c_max, "Classes per table, upper bound")->capture_default_str();
    app->add_option("--tree-weight", p.tree_weight, "Share of tree-generated tables; the rest are MLP SCMs")
        ->capture_default_str();
    app->add_option("--noise", p.noise, "Latent noise scale / label flip rate")->capture_default_str();
    app->add_option("--categorical-fraction", p.categorical_fraction, "Share of quantized columns")->capture_default_str();
    app->add_option("--tree-depth-min", p.tree_depth_min, "Tree depth, lower bound")->capture_default_str();
    app->add_option("--tree-depth-max", p.tree_depth_max, "Tree depth, upper bound")->capture_default_str();
    app->add_option("--mlp-layers-min", p.mlp_layers_min, "MLP depth, lower bound")->capture_default_str();
    app->add_option("--mlp-layers-max", p.mlp_layers_max, "MLP depth, upper bound")->capture_default_str();
    app->add_option("--prior-seed", p.seed, "Prior seed")->capture_default_str();
}

void add_pipeline_options(CLI::App* app, PipelineConfig& c) {
    app->add_option("--views", c.views, "Ensemble views")->capture_default_str();
    app->add_option("--temperature", c.temperature, "Softmax temperature")->capture_default_str();
    app->add_option("--z-clip", c.z_clip, "Outlier clipping threshold in standard deviations")->capture_default_str();
    app->add_option("--pipeline-seed", c.seed, "Seed for shuffles and class permutations")->capture_default_str();
}

int run_train(const TrainConfig& tc, PriorConfig pc, const ModelConfig& mc, std::size_t report_every) {
    pc.mlp_weight = 1.0 - pc.tree_weight;
    std::cout << "training " << tc.steps << " steps, " << tc.episodes_per_step << " episodes per step\n";
    Model trained(mc);
    auto res = meta_train(tc, pc, mc, &trained, [&](const StepMetrics& s) {
        if (report_every && (s.step % report_every == 0 || s.step + 1 == tc.steps)) {
            std::cout << "step " << std::setw(6) << s.step << "  loss " << std::fixed << std::setprecision(4) << s.loss
                      << "  query_acc " << s.query_acc << "  lr " << std::scientific << std::setprecision(2) << s.lr
                      << std::defaultfloat << (s.skipped ? "  (skipped: non-finite)" : "") << "\n";
        }
    });
    std::cout << "checkpoint " << res.checkpoint << "\n";
    return 0;
}

int run_eval(const std::string& data, const std::vector<std::string>& models, const FewshotConfig& cfg,
             const std::string& label, const std::string& out) {
    const auto datasets = load_dataset_dir(data, label);
    if (datasets.empty()) throw DataError("no .csv files in '" + data + "'");
    const auto report = run_fewshot(datasets, cfg, models);
    for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
    std::cout << report.summary_table();
    if (!out.empty()) {
        std::ofstream f(out);
        if (!f) throw DataError("cannot write '" + out + "'");
        f << report.to_csv();
        std::cout << "report " << out << "\n";
    }
    return 0;
}

int run_predict(const std::string& fit_csv, const std::string& query_csv, const std::string& model_path,
                const std::string& label, const PipelineConfig& pc, const std::string& out) {
    const RawTable train = read_csv(fit_csv);
    if (train.header.size() < 2) throw DataError("'" + fit_csv + "' needs at least one feature and a label column");
    const std::size_t yj = label.empty() ? train.header.size() - 1 : train.column_index(label);
    const std::string label_name = train.header[yj];
    RawTable features = train.without_column(yj);
    std::vector<std::string> y = train.column(yj);
    // unlabeled fit rows cannot serve as support
    RawTable kept;
    kept.header = features.header;
    std::vector<std::string> ky;
    for (std::size_t r = 0; r < y.size(); ++r)
        if (!is_missing(y[r])) {
            kept.rows.push_back(features.rows[r]);
            ky.push_back(y[r]);
        }
    WarningLog warnings;
    const FitState state = fit(kept, ky, pc, &warnings);
    RawTable query = read_csv(query_csv);
    auto it = std::find(query.header.begin(), query.header.end(), label_name);
    if (it != query.header.end()) query = query.without_column(static_cast<std::size_t>(it - query.header.begin()));
    const Model model = Model::load(model_path);
    const auto probs = predict_proba(query, state, model, &warnings);
    for (const auto& w : warnings.messages) std::cerr << "warning: " << w << "\n";
    const std::size_t C = state.num_classes;
    const auto preds = argmax_rows(probs, C);
    std::ofstream file;
    if (!out.empty()) {
        file.open(out);
        if (!file) throw DataError("cannot write '" + out + "'");
    }
    std::ostream& os = out.empty() ? std::cout : file;
    os << "prediction";
    for (const auto& name : state.label_names) os << ",p_" << name;
    os << "\n" << std::setprecision(6);
    for (std::size_t r = 0; r < preds.size(); ++r) {
        os << state.label_names[preds[r]];
        for (std::size_t c = 0; c < C; ++c) os << ',' << probs[r * C + c];
        os << "\n";
    }
    return 0;
}

int run_gen(const PriorConfig& p0, std::size_t count, std::uint64_t seed, const std::string& out) {
    PriorConfig p = p0;
    p.mlp_weight = 1.0 - p.tree_weight;
    std::filesystem::create_directories(out);
    for (std::size_t i = 0; i < count; ++i) {
        const auto t = sample_table(p, seed + i);
        std::ostringstream name;
        name << "table_" << std::setw(4) << std::setfill('0') << i << ".csv";
        dump_table(t, (std::filesystem::path(out) / name.str()).string());
    }
    std::cout << "wrote " << count << " tables to " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"biax: tabular in-context learning with a biaxial row encoder"};
    app.set_config("--config", "", "Key-value (INI/TOML) file; any flag can be set there, subcommand flags under [name]");
    app.require_subcommand(1);

    ModelConfig mc;
    PriorConfig pc;
    TrainConfig tc;
    std::size_t report_every = 10;
    auto* train = app.add_subcommand("train", "Meta-train on synthetic tables");
    add_model_options(train, mc);
    add_prior_options(train, pc);
    train->add_option("--steps", tc.steps, "Optimizer steps")->capture_default_str();
    train->add_option("--episodes-per-step", tc.episodes_per_step, "Episodes per update")->capture_default_str();
    train->add_option("--micro-batch-size", tc.micro_batch_size, "Episodes per forward pass")->capture_default_str();
    train->add_option("--episodes-per-table", tc.episodes_per_table, "Episodes drawn from each table")->capture_default_str();
    train->add_option("--lr", tc.lr, "Peak learning rate")->capture_default_str();
    train->add_option("--warmup", tc.warmup_steps, "Linear warmup steps")->capture_default_str();
    train->add_option("--decay-steps", tc.decay_steps, "Cosine horizon (0: total steps)")->capture_default_str();
    train->add_option("--min-lr-fraction", tc.min_lr_fraction, "Cosine floor as a fraction of the peak")->capture_default_str();
    train->add_option("--clip-norm", tc.clip_norm, "Global gradient norm bound")->capture_default_str();
    train->add_option("--seed", tc.seed, "Training seed")->capture_default_str();
    train->add_option("--checkpoint-interval", tc.checkpoint_interval, "Steps between checkpoints (0: final only)")
        ->capture_default_str();
    train->add_option("--out,--checkpoint-dir", tc.checkpoint_dir, "Checkpoint directory")->capture_default_str();
    train->add_option("--log", tc.log_path, "NDJSON training log");
    add_enum(train, "--selection", tc.selection, {{"random", SupportSelection::random}, {"knn", SupportSelection::knn}},
             "Support selection for training episodes");
    train->add_option("--knn-alpha", tc.knn_alpha, "Relevance weight for kNN selection")->capture_default_str();
    train->add_option("--max-rows", tc.max_rows, "Rows per training episode, upper bound")->capture_default_str();
    train->add_option("--support-fraction-min", tc.support_fraction_min, "Support share, lower bound")->capture_default_str();
    train->add_option("--support-fraction-max", tc.support_fraction_max, "Support share, upper bound")->capture_default_str();
    train->add_option("--report-every", report_every, "Print progress every N steps (0: quiet)")->capture_default_str();

    FewshotConfig fc;
    std::string data, label, report_out, selection = "uniform";
    std::vector<std::string> models;
    auto* eval = app.add_subcommand("eval-fewshot", "Few-shot sweep over a directory of CSV datasets");
    eval->add_option("--data", data, "Directory of CSV files (label in the last column unless --label)")->required();
    eval->add_option("--k", fc.k_list, "Support sizes")->delimiter(',')->capture_default_str();
    eval->add_option("--selection", selection, "uniform | knn")->check(CLI::IsMember({"uniform", "knn", "knn_diverse"}))
        ->capture_default_str();
    eval->add_option("--seeds", fc.seeds, "Seeds per (dataset, k)")->capture_default_str();
    eval->add_option("--model", models, "Checkpoint path; repeat to rank several models")->required();
    eval->add_option("--label", label, "Label column name");
    eval->add_option("--test-fraction", fc.test_fraction, "Held-out share per dataset")->capture_default_str();
    eval->add_option("--max-test-rows", fc.max_test_rows, "Cap on test rows (0: all)")->capture_default_str();
    eval->add_option("--knn-alpha", fc.knn_alpha, "Relevance weight for kNN selection")->capture_default_str();
    eval->add_option("--base-seed", fc.base_seed, "First seed")->capture_default_str();
    eval->add_option("--report", report_out, "Write the per-cell CSV report here");
    add_pipeline_options(eval, fc.pipeline);

    std::string fit_csv, query_csv, model_path, predict_label, predict_out;
    PipelineConfig pred_cfg;
    auto* predict = app.add_subcommand("predict", "Fit on a labeled CSV and predict a query CSV");
    predict->add_option("--fit", fit_csv, "Labeled CSV used as the support set")->required();
    predict->add_option("--query", query_csv, "CSV with the same feature columns")->required();
    predict->add_option("--model", model_path, "Checkpoint path")->required();
    predict->add_option("--label", predict_label, "Label column name (default: last column)");
    predict->add_option("--out", predict_out, "Write predictions here instead of stdout");
    add_pipeline_options(predict, pred_cfg);

    PriorConfig gen_prior;
    std::size_t gen_count = 10;
    std::uint64_t gen_seed = 0;
    std::string gen_out;
    auto* gen = app.add_subcommand("gen-tables", "Dump synthetic prior tables as CSV plus JSON sidecars");
    add_prior_options(gen, gen_prior);
    gen->add_option("--count", gen_count, "Tables to write")->capture_default_str();
    gen->add_option("--seed", gen_seed, "Seed of the first table")->capture_default_str();
    gen->add_option("--out", gen_out, "Output directory")->required();

    CLI11_PARSE(app, argc, argv);
    try {
        if (*train) return run_train(tc, pc, mc, report_every);
        if (*eval) {
            fc.selection = parse_selection(selection);
            return run_eval(data, models, fc, label, report_out);
        }
        if (*predict) return run_predict(fit_csv, query_csv, model_path, predict_label, pred_cfg, predict_out);
        if (*gen) return run_gen(gen_prior, gen_count, gen_seed, gen_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
