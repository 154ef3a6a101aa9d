#include "commands.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "hierprobe/attacks.hpp"
#include "hierprobe/data.hpp"
#include "hierprobe/matrix_io.hpp"
#include "hierprobe/network.hpp"
#include "hierprobe/probe.hpp"
#include "hierprobe/training.hpp"
#include "hierprobe/util.hpp"

namespace fs = std::filesystem;

namespace hierprobe::cli {

namespace {

void require_command(const Config& cfg, const std::string& command) {
    if (cfg.get_or("command", command) != command)
        throw UsageError("config echo is for command '" + cfg.get_or("command", "?") +
                         "', not '" + command + "'");
}

std::uint64_t require_seed(const Config& cfg) {
    if (!cfg.has("seed")) throw UsageError("missing --seed (runs must be fully seeded)");
    return cfg.get_u64("seed");
}

fs::path make_run_dir(const Config& cfg) {
    const fs::path out = cfg.get("out");
    fs::create_directories(out);
    return out;
}

std::string write_echo(Config& cfg, const std::string& command, const fs::path& out) {
    cfg.set_default("command", command);
    const std::string echo = cfg.echo_text();
    write_text_file(out / "config.echo", echo);
    return hex64(fnv1a64(echo));
}

DatasetPair load_dataset_arg(const std::string& arg) {
    if (arg.rfind("synth:", 0) == 0) return synthesize(parse_synthetic_spec(arg));
    const fs::path p(arg);
    fs::path train_path, test_path;
    if (fs::is_directory(p)) {
        train_path = p / "train.hpds";
        test_path = p / "test.hpds";
    } else {
        train_path = arg + "_train.hpds";
        test_path = arg + "_test.hpds";
    }
    if (!fs::exists(train_path))
        throw UsageError("dataset not found: " + train_path.string() +
                         " (expected synth:..., a directory with train.hpds/test.hpds, or a path prefix)");
    DatasetPair out;
    out.train = load_dataset(train_path);
    out.train.split = "train";
    if (fs::exists(test_path)) {
        out.test = load_dataset(test_path);
        out.test.split = "test";
    } else {
        out.test = out.train;
        out.test.split = "test";
    }
    return out;
}

// Attack options share the defaults-then-preset-then-flags resolution in every
// command that runs attacks. The prefix distinguishes the inner training
// attack from the evaluation attack.
AttackConfig resolve_attack(Config& cfg, const std::string& prefix, const std::string& preset_default,
                            const std::string& eps_default, const std::string& alpha_default,
                            const std::string& steps_default, const std::string& rs_default) {
    cfg.set_default(prefix + "attack", preset_default);
    AttackConfig a;
    const std::string preset = cfg.get(prefix + "attack");
    if (preset != "custom") a = attack_preset(preset);

    auto resolve = [&](const std::string& key, const std::string& def, double* dval, int* ival,
                       bool* bval) {
        const std::string full = prefix + key;
        if (preset == "custom") cfg.set_default(full, def);
        if (preset == "custom" || cfg.is_explicit(full)) {
            if (dval) *dval = cfg.get_double(full);
            if (ival) *ival = static_cast<int>(cfg.get_int(full));
            if (bval) *bval = cfg.get_bool(full);
        }
    };
    resolve("eps", eps_default, &a.epsilon, nullptr, nullptr);
    resolve("alpha", alpha_default, &a.step_size, nullptr, nullptr);
    resolve("steps", steps_default, nullptr, &a.steps, nullptr);
    resolve("random_start", rs_default, nullptr, nullptr, &a.random_start);

    // echo the resolved values so a replay does not depend on preset tables
    cfg.set(prefix + "eps", format_g17(a.epsilon));
    cfg.set(prefix + "alpha", format_g17(a.step_size));
    cfg.set(prefix + "steps", std::to_string(a.steps));
    cfg.set(prefix + "random_start", a.random_start ? "1" : "0");
    a.validate();
    return a;
}

TrainConfig resolve_train_config(Config& cfg) {
    TrainConfig tc;
    cfg.set_default("regime", "std");
    cfg.set_default("schedule", "desk");
    const std::string schedule = cfg.get("schedule");
    if (schedule == "paper") {
        // the full-scale setup: 200 epochs, lr 0.1 divided by 10 at 75 and 90
        cfg.set_default("epochs", "200");
        cfg.set_default("lr", "0.1");
        cfg.set_default("decay_epochs", "75,90");
    } else if (schedule == "desk") {
        cfg.set_default("epochs", "24");
        cfg.set_default("lr", "0.05");
        cfg.set_default("decay_epochs", "16,20");
    } else {
        throw UsageError("unknown schedule '" + schedule + "' (expected desk or paper)");
    }
    cfg.set_default("batch_size", "64");
    cfg.set_default("momentum", "0.9");
    cfg.set_default("weight_decay", "2e-4");
    cfg.set_default("decay_factor", "0.1");
    cfg.set_default("lambda", "0.002");
    cfg.set_default("reg_per_example_mean", "1");

    tc.regime = parse_regime(cfg.get("regime"));
    tc.epochs = static_cast<int>(cfg.get_int("epochs"));
    tc.batch_size = static_cast<int>(cfg.get_int("batch_size"));
    tc.lr = cfg.get_double("lr");
    tc.momentum = cfg.get_double("momentum");
    tc.weight_decay = cfg.get_double("weight_decay");
    tc.lr_decay_epochs = cfg.get_int_list("decay_epochs");
    tc.lr_decay_factor = cfg.get_double("decay_factor");
    tc.lambda_reg = cfg.get_double("lambda");
    tc.reg_per_example_mean = cfg.get_bool("reg_per_example_mean");
    tc.seed = require_seed(cfg);

    // desk-scale defaults: epsilon in raw pixel units on [0,1] synthetic data
    tc.inner_attack = resolve_attack(cfg, "", "desk_train", "0.025", "0.00625", "7", "1");
    tc.eval_attack = resolve_attack(cfg, "eval_", "desk_eval", "0.025", "0.00625", "20", "0");
    tc.validate();
    return tc;
}

} // namespace

int cmd_train(Config& cfg) {
    require_command(cfg, "train");
    const fs::path out = make_run_dir(cfg);
    cfg.set_default("model", "cnn4");
    cfg.set_default("dataset", "synth:default");
    const TrainConfig tc = resolve_train_config(cfg);
    const std::string config_hash = write_echo(cfg, "train", out);

    const DatasetPair data = load_dataset_arg(cfg.get("dataset"));
    const auto dims = data.train.dims();

    std::ofstream manifest_stream(out / "manifest.txt");
    if (!manifest_stream) throw FormatError("cannot write manifest in " + out.string());

    TrainResult result;
    if (tc.regime == Regime::ATC) {
        if (!cfg.has("pretrained"))
            throw UsageError("--regime at_c needs --pretrained ROBUST_CHECKPOINT "
                             "(the hierarchy is extracted from a pretrained robust model)");
        Network pretrained = load_checkpoint(cfg.get("pretrained"));
        auto r = train_clustered(pretrained, data, tc, &manifest_stream);
        result.net = std::move(r.net);
        result.best_net = std::move(r.best_net);
        result.best_epoch = r.best_epoch;
        result.manifest = std::move(r.manifest);
    } else {
        Network net = make_model(cfg.get("model"), dims, data.train.hierarchy.num_fine(),
                                 split_seed(tc.seed, 41));
        result = tc.regime == Regime::STD ? train_standard(std::move(net), data, tc, &manifest_stream)
                                          : train_adversarial(std::move(net), data, tc, &manifest_stream);
    }

    result.net.meta().config_hash = config_hash;
    save_checkpoint(result.net, out / "checkpoint.hprb");
    if (tc.epochs > 0) {
        result.best_net.meta().config_hash = config_hash;
        save_checkpoint(result.best_net, out / "checkpoint_best.hprb");
    }
    std::cout << "run directory: " << out.string() << "\n";
    if (!result.manifest.epochs.empty()) {
        const auto& last = result.manifest.epochs.back();
        std::cout << "final clean_acc=" << format_g17(last.clean_acc)
                  << " robust_acc=" << format_g17(last.robust_acc) << "\n";
    }
    return 0;
}

int cmd_probe(Config& cfg) {
    require_command(cfg, "probe");
    const fs::path out = make_run_dir(cfg);
    const std::uint64_t seed = require_seed(cfg);
    write_echo(cfg, "probe", out);

    Network net = load_checkpoint(cfg.get("checkpoint"));
    Network linear = linearize(net);

    Rng probe_rng(split_seed(seed, 31));
    const auto dims = net.input_dims();
    Tensor probe = Tensor::zeros({1, dims[0], dims[1], dims[2]});
    for (auto& v : probe.mutable_data()) v = probe_rng.uniform();

    auto [w, b] = extract_weight_matrix(linear, probe);
    const CorrelationMatrix c = correlation_matrix(w);
    const SignMatrix c_op = sign_approximation(c);
    const HierarchyPartition partition = extract_hierarchy(c_op);

    write_matrix_csv(out / "W.csv", w.class_labels, w.values, w.input_size, w.num_classes);
    write_matrix_csv(out / "C.csv", c.class_labels, c.values, c.n, c.n);
    std::vector<double> sign_values(c_op.values.begin(), c_op.values.end());
    write_matrix_csv(out / "C_op.csv", c.class_labels, sign_values, c_op.n, c_op.n);
    write_pgm_signed(out / "C.pgm", c.values, c.n, c.n);

    std::string hier_text;
    for (const auto& g : partition.groups) {
        for (std::size_t i = 0; i < g.size(); ++i)
            hier_text += (i ? " " : "") + std::to_string(g[i]);
        hier_text += "\n";
    }
    write_text_file(out / "hierarchy.txt", hier_text);

    std::string bias_text;
    for (double v : b.values) bias_text += format_g17(v) + "\n";
    write_text_file(out / "bias.txt", bias_text);

    std::cout << "probed " << c.n << " classes into " << partition.groups.size() << " groups\n";
    return 0;
}

int cmd_attack(Config& cfg) {
    require_command(cfg, "attack");
    const fs::path out = make_run_dir(cfg);
    const std::uint64_t seed = require_seed(cfg);
    AttackConfig a = resolve_attack(cfg, "", "desk_eval", "0.025", "0.00625", "20", "0");
    write_echo(cfg, "attack", out);

    Network net = load_checkpoint(cfg.get("checkpoint"));
    const DatasetPair data = load_dataset_arg(cfg.get("dataset"));
    const HierarchicalDataset& split = data.test;

    Rng rng(split_seed(seed, 51));
    const double clean = clean_accuracy(net, split);
    const double robust = a.epsilon > 0.0 || a.steps > 0
                              ? robust_accuracy(net, split, a, rng)
                              : clean;

    std::ostringstream acc;
    acc << "clean_accuracy=" << format_g17(clean) << "\n"
        << "robust_accuracy=" << format_g17(robust) << "\n"
        << "eps=" << format_g17(a.epsilon) << " alpha=" << format_g17(a.step_size)
        << " steps=" << a.steps << " random_start=" << (a.random_start ? 1 : 0) << "\n";
    write_text_file(out / "robust_acc.txt", acc.str());

    AttackConfig untargeted = a;
    untargeted.targeted = false;
    Rng rng_u(split_seed(seed, 52));
    const auto m_u = attack_confusion_matrix(net, split, untargeted, rng_u);

    AttackConfig targeted = a;
    targeted.targeted = true;
    if (targeted.steps < 1) { // targeted single step of size epsilon
        targeted.steps = 1;
        targeted.step_size = targeted.epsilon;
    }
    Rng rng_t(split_seed(seed, 53));
    const auto m_t = attack_confusion_matrix(net, split, targeted, rng_t);

    const auto& labels = split.hierarchy.fine_names;
    write_matrix_csv(out / "M_untargeted.csv", labels, m_u.values, m_u.n, m_u.n);
    write_matrix_csv(out / "M_targeted.csv", labels, m_t.values, m_t.n, m_t.n);
    write_pgm_unit(out / "M_untargeted.pgm", m_u.values, m_u.n, m_u.n);
    write_pgm_unit(out / "M_targeted.pgm", m_t.values, m_t.n, m_t.n);

    std::cout << "clean=" << format_g17(clean) << " robust=" << format_g17(robust) << "\n";
    return 0;
}

int cmd_features(Config& cfg) {
    require_command(cfg, "features");
    const fs::path out = make_run_dir(cfg);
    require_seed(cfg);
    write_echo(cfg, "features", out);

    Network net = load_checkpoint(cfg.get("checkpoint"));
    const DatasetPair data = load_dataset_arg(cfg.get("dataset"));
    const HierarchicalDataset& split = data.test;

    const FeatureCenters z = feature_centers(net, split);
    const FeatureDistanceMatrix f = feature_distance_matrix(z);

    std::vector<std::string> dim_labels;
    for (int d = 0; d < z.feature_dim; ++d) dim_labels.push_back("f" + std::to_string(d));
    write_matrix_csv(out / "Z.csv", dim_labels, z.values, z.num_classes, z.feature_dim);
    write_matrix_csv(out / "F_dist.csv", split.hierarchy.fine_names, f.values, f.n, f.n);
    write_pgm_unit(out / "F_dist.pgm", f.values, f.n, f.n);

    std::cout << "feature centers for " << z.num_classes << " classes, dim " << z.feature_dim << "\n";
    return 0;
}

int cmd_da(Config& cfg) {
    require_command(cfg, "da");
    const fs::path out = make_run_dir(cfg);
    cfg.set_default("model", "cnn4");
    cfg.set_default("dataset", "synth:super=4,sub=5,train=100,test=30");
    cfg.set_default("source_count", "4");
    cfg.set_default("ft_epochs", "20");
    cfg.set_default("ft_lr", "0.01");
    const TrainConfig tc = resolve_train_config(cfg);
    const std::string config_hash = write_echo(cfg, "da", out);

    const DatasetPair data = load_dataset_arg(cfg.get("dataset"));
    const int source_count = static_cast<int>(cfg.get_int("source_count"));

    auto [source, target, split] = subpopulation_split(data, source_count, tc.seed);
    {
        std::string split_text;
        for (std::size_t s = 0; s < split.source_fine_per_super.size(); ++s) {
            split_text += data.train.hierarchy.superclass_names[s] + " source:";
            for (int f : split.source_fine_per_super[s]) split_text += " " + std::to_string(f);
            split_text += " target:";
            for (int f : split.target_fine_per_super[s]) split_text += " " + std::to_string(f);
            split_text += "\n";
        }
        write_text_file(out / "split.txt", split_text);
    }

    std::ofstream manifest_stream(out / "manifest.txt");
    TrainResult trained;
    if (tc.regime == Regime::ATC) {
        // the extraction model is an AT run with the same configuration
        TrainConfig at_cfg = tc;
        at_cfg.regime = Regime::AT;
        Network at_net = make_model(cfg.get("model"), source.train.dims(),
                                    source.train.hierarchy.num_fine(), split_seed(tc.seed, 41));
        TrainResult at = train_adversarial(std::move(at_net), source, at_cfg, nullptr);
        save_checkpoint(at.net, out / "extraction_model.hprb");
        auto r = train_clustered(at.net, source, tc, &manifest_stream);
        trained.net = std::move(r.net);
        trained.manifest = std::move(r.manifest);
    } else {
        Network net = make_model(cfg.get("model"), source.train.dims(),
                                 source.train.hierarchy.num_fine(), split_seed(tc.seed, 41));
        trained = tc.regime == Regime::STD
                      ? train_standard(std::move(net), source, tc, &manifest_stream)
                      : train_adversarial(std::move(net), source, tc, &manifest_stream);
    }
    trained.net.meta().config_hash = config_hash;
    save_checkpoint(trained.net, out / "source_model.hprb");

    const double source_fine = evaluate(trained.net, source.test, LabelKind::Fine);
    const double source_coarse =
        evaluate(trained.net, source.test, LabelKind::Coarse, &source.test.hierarchy);
    const double target_coarse =
        evaluate(trained.net, target.test, LabelKind::Coarse, &source.test.hierarchy);

    std::ofstream ft_stream(out / "manifest_ft.txt");
    TrainResult ft = finetune(trained.net, target, static_cast<int>(cfg.get_int("ft_epochs")),
                              cfg.get_double("ft_lr"), tc, &ft_stream);
    ft.net.meta().config_hash = config_hash;
    save_checkpoint(ft.net, out / "finetuned_model.hprb");
    const double target_coarse_ft = evaluate(ft.net, target.test, LabelKind::Coarse);

    std::ostringstream table;
    table << "source_fine source_coarse target_coarse target_coarse_ft\n"
          << format_g17(source_fine) << " " << format_g17(source_coarse) << " "
          << format_g17(target_coarse) << " " << format_g17(target_coarse_ft) << "\n";
    write_text_file(out / "results.txt", table.str());
    std::cout << table.str();
    return 0;
}

int cmd_convert(Config& cfg) {
    require_command(cfg, "convert");
    require_seed(cfg);
    cfg.set_default("channels", "3");
    cfg.set_default("height", "32");
    cfg.set_default("width", "32");

    std::vector<fs::path> inputs;
    {
        std::istringstream is(cfg.get("input"));
        std::string tok;
        while (std::getline(is, tok, ',')) inputs.emplace_back(tok);
    }
    const HierarchySpec hier = load_hierarchy_file(cfg.get("hierarchy"));
    HierarchicalDataset data =
        convert_raw_dataset(inputs, hier, static_cast<int>(cfg.get_int("channels")),
                            static_cast<int>(cfg.get_int("height")),
                            static_cast<int>(cfg.get_int("width")));
    const fs::path out = cfg.get("out");
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    save_dataset(data, out);
    std::cout << "wrote " << data.size() << " records to " << out.string() << "\n";
    return 0;
}

int cmd_synth(Config& cfg) {
    require_command(cfg, "synth");
    require_seed(cfg);
    cfg.set_default("spec", "synth:default");
    const fs::path out = make_run_dir(cfg);
    write_echo(cfg, "synth", out);

    const DatasetPair data = synthesize(parse_synthetic_spec(cfg.get("spec")));
    save_dataset(data.train, out / "train.hpds");
    save_dataset(data.test, out / "test.hpds");
    std::cout << "wrote " << data.train.size() << " train and " << data.test.size()
              << " test records to " << out.string() << "\n";
    return 0;
}

void print_usage() {
    std::cout <<
        "usage: hierprobe COMMAND [--key value ...]\n"
        "\n"
        "commands:\n"
        "  train     train a model (--regime std|at|at_c, --model, --dataset, --seed, --out)\n"
        "  probe     extract W, C, C_op and the class hierarchy from a checkpoint\n"
        "  attack    robust accuracy and attack confusion matrices\n"
        "  da        subpopulation-shift domain adaptation pipeline\n"
        "  features  class feature centers and normalized distance matrix\n"
        "  convert   CIFAR-style raw binary -> .hpds dataset\n"
        "  synth     generate and save a synthetic hierarchical dataset\n"
        "\n"
        "common options:\n"
        "  --seed N         required everywhere; all runs are fully seeded\n"
        "  --out DIR        run directory (config echo + outputs)\n"
        "  --config FILE    load key=value lines before applying flags\n"
        "  --dataset SPEC   synth:default, synth:key=val,..., or a dataset path\n"
        "  --attack NAME    preset: fgsm pgd10 pgd20 pgd7_3 pgd5_2 pgd5_1.5 pgd3_1 pgd1_0.5\n"
        "                   or custom (--eps --alpha --steps --random_start)\n";
}

} // namespace hierprobe::cli
