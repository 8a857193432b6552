#include "commands.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <optional>

#include "sentinet/data.hpp"
#include "sentinet/eval.hpp"
#include "sentinet/network.hpp"
#include "sentinet/optim.hpp"

namespace sentinet::cli {

namespace {

int guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
}

void require(const std::filesystem::path& p, const char* key) {
  if (p.empty()) throw ConfigError(std::string("missing required setting '") + key + "'");
}

// Resolved configuration as "# key = value" lines.
void echo_config(const RunConfig& config, std::ostream& os) {
  std::ostringstream text;
  config.echo(text);
  std::istringstream lines(text.str());
  std::string line;
  while (std::getline(lines, line)) os << "# " << line << '\n';
}

std::string fixed6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

// Shared by train and finetune once the model is initialized.
int run_training(const RunConfig& config, Network<Real>& model, const DatasetManifest& manifest,
                 const TrainConfig& tc, std::ostream& out, std::ostream& err) {
  std::filesystem::create_directories(config.out);
  {
    std::ofstream cfg(config.out / "config.txt");
    config.echo(cfg);
  }
  std::ofstream log(config.out / "train.log", std::ios::trunc);
  if (!log) throw DataError("cannot write " + (config.out / "train.log").string());
  echo_config(config, log);

  TrainConfig run = tc;
  run.snapshot_prefix = config.out / "snapshot";
  TrainCallbacks callbacks;
  callbacks.on_iteration = [&log](const LogEntry& e) { log << format_log_entry(e) << '\n' << std::flush; };
  callbacks.on_snapshot = [&err](const std::filesystem::path& p) { err << "snapshot " << p.string() << '\n'; };
  callbacks.on_warning = [&err](const std::string& w) { err << "warning: " << w << '\n'; };

  const auto result = train(model, manifest, run, callbacks);
  const auto final_path = config.out / "final.dsbw";
  save_weights(model, final_path);
  out << "iterations\t" << result.log.size() << '\n'
      << "epochs\t" << result.epochs_started << '\n'
      << "skipped_records\t" << result.skipped_records << '\n'
      << "final_loss\t" << (result.log.empty() ? 0.0 : result.log.back().loss) << '\n'
      << "weights\t" << final_path.string() << '\n';
  return kExitOk;
}

struct Inputs {
  AnpVocabulary vocab;
  DatasetManifest manifest;
};

Inputs load_inputs(const RunConfig& config) {
  require(config.manifest, "manifest");
  require(config.vocab, "vocab");
  return {load_vocabulary(config.vocab), load_manifest(config.manifest)};
}

}  // namespace

int cmd_train(const RunConfig& config, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    echo_config(config, err);
    require(config.out, "out");
    if (!config.pretrained.empty()) throw ConfigError("train starts from scratch; use finetune with pretrained weights");
    const TrainConfig tc = config.resolved_train(kScratchBaseLr);
    tc.validate();
    auto in = load_inputs(config);
    const Architecture arch = config.architecture(in.vocab.size());
    auto model = build<Real>(arch);
    Rng init_rng = Rng(tc.seed).split(0x1417);
    init_scratch(model, init_rng, config.init_stddevs(arch));
    if (config.subtract_mean) model.channel_means = compute_channel_means(in.manifest);
    model.vocabulary_checksum = in.vocab.checksum();
    return run_training(config, model, in.manifest, tc, out, err);
  });
}

int cmd_finetune(const RunConfig& config, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    echo_config(config, err);
    require(config.pretrained, "pretrained");
    require(config.out, "out");
    const TrainConfig tc = config.resolved_train(kFinetuneBaseLr);
    tc.validate();
    auto in = load_inputs(config);
    const WeightFile pretrained = read_weight_file(config.pretrained);
    Architecture arch = architecture_of(pretrained);
    arch.num_classes = in.vocab.size();
    arch.dropout_rate = config.dropout_rate;
    auto model = build<Real>(arch);
    Rng init_rng = Rng(tc.seed).split(0x1417);
    init_finetune(model, pretrained, init_rng);
    if (!config.subtract_mean) model.channel_means = {0.0, 0.0, 0.0};
    model.vocabulary_checksum = in.vocab.checksum();
    return run_training(config, model, in.manifest, tc, out, err);
  });
}

int cmd_predict(const RunConfig& config, const std::vector<std::string>& images, std::ostream& out,
                std::ostream& err) {
  return guarded(err, [&] {
    echo_config(config, err);
    require(config.weights, "weights");
    require(config.vocab, "vocab");
    if (images.empty()) throw ConfigError("predict needs at least one image path");
    const auto vocab = load_vocabulary(config.vocab);
    const auto model = load_weights<Real>(config.weights);
    if (model.vocabulary_checksum != 0 && model.vocabulary_checksum != vocab.checksum())
      err << "warning: vocabulary checksum differs from the one stored with the weights\n";
    int status = kExitOk;
    for (const auto& path : images) {
      try {
        const auto annotations = annotate(model, vocab, load_image(path), config.k);
        out << "image\t" << path << '\n';
        for (const auto& a : annotations) out << a.name << '\t' << fixed6(a.probability) << '\n';
        out << '\n';
      } catch (const DataError& e) {
        err << "error: " << path << ": " << e.what() << '\n';
        status = kExitData;
      }
    }
    return status;
  });
}

int cmd_evaluate(const RunConfig& config, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    echo_config(config, err);
    require(config.weights, "weights");
    require(config.vocab, "vocab");
    const auto vocab = load_vocabulary(config.vocab);
    const auto model = load_weights<Real>(config.weights);
    if (vocab.size() != model.num_classes())
      throw ConfigError("vocabulary has " + std::to_string(vocab.size()) + " ANPs but the weights have " +
                        std::to_string(model.num_classes()) + " classes");
    const std::string run_name = config.weights.stem().string();
    if (!config.out.empty()) std::filesystem::create_directories(config.out);

    auto emit = [&](const std::string& file, const std::function<void(std::ostream&)>& write) {
      if (config.out.empty()) {
        write(out);
        return;
      }
      std::ofstream f(config.out / file, std::ios::trunc);
      if (!f) throw DataError("cannot write " + (config.out / file).string());
      write(f);
      out << file << '\n';
    };

    if (config.mode == "retrieval") {
      if (config.relevance.empty()) throw DataError("retrieval mode needs relevance annotations (relevance = ...)");
      const auto judgements = load_relevance(config.relevance);
      const auto report = retrieval_eval(model, judgements, vocab, config.relevance.parent_path());
      std::ostringstream ap, nouns;
      write_retrieval_tables(report, vocab, ap, nouns);
      emit("retrieval_ap.tsv", [&](std::ostream& o) { o << ap.str(); });
      emit("retrieval_noun_map.tsv", [&](std::ostream& o) { o << nouns.str(); });
      return kExitOk;
    }

    require(config.manifest, "manifest");
    const auto manifest = load_manifest(config.manifest);
    const auto test = manifest.split_indices(Split::test);
    if (test.empty()) throw DataError("manifest has no test records");
    std::vector<std::size_t> skipped;
    const auto pred = predict_records(model, manifest, test, &skipped);
    for (const auto s : skipped) err << "warning: skipped unreadable test image " << manifest.records[s].path << '\n';
    if (pred.images() == 0) throw DataError("no readable test images");
    const auto report = annotation_report(pred, config.subset_size);
    emit("annotation.tsv", [&](std::ostream& o) { write_annotation_table({{run_name, report}}, o); });
    emit("annotation_per_anp.tsv", [&](std::ostream& o) { write_per_anp_table(report, vocab, o); });
    return kExitOk;
  });
}

int cmd_validate_manifest(const RunConfig& config, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    echo_config(config, err);
    auto in = load_inputs(config);
    const auto report = validate_manifest(in.manifest, in.vocab, config.min_train_images);
    write_manifest_report(report, in.vocab, out);
    return report.clean() ? kExitOk : kExitData;
  });
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Train, fine-tune and evaluate the ANP concept classifier"};
  app.require_subcommand(1);

  std::string config_path;
  std::map<std::string, std::string> flags;
  std::vector<std::string> overrides;
  std::vector<std::string> images;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "key = value configuration file");
    for (const auto& [flag, key] : std::vector<std::pair<std::string, std::string>>{
             {"--weights", "weights"},       {"--manifest", "manifest"},   {"--vocab", "vocab"},
             {"--seed", "seed"},             {"--iterations", "max_iterations"},
             {"--batch-size", "batch_size"}, {"--base-lr", "base_lr"},     {"--out", "out"},
             {"--pretrained", "pretrained"}, {"--relevance", "relevance"}, {"--k", "k"},
             {"--mode", "mode"}}) {
      const std::string k = key;
      sub->add_option_function<std::string>(flag, [&flags, k](const std::string& v) { flags[k] = v; });
    }
    sub->add_option("--set", overrides, "extra key=value overrides");
  };

  auto* train_cmd = app.add_subcommand("train", "train from scratch");
  auto* finetune_cmd = app.add_subcommand("finetune", "fine-tune from pretrained weights");
  auto* predict_cmd = app.add_subcommand("predict", "top-k ANPs for images");
  auto* evaluate_cmd = app.add_subcommand("evaluate", "annotation or retrieval evaluation");
  auto* validate_cmd = app.add_subcommand("validate-manifest", "check split rules");
  for (auto* sub : {train_cmd, finetune_cmd, predict_cmd, evaluate_cmd, validate_cmd}) add_common(sub);
  predict_cmd->add_option("images", images, "image files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, e2;
    const int code = app.exit(e, o, e2);
    out << o.str();
    err << e2.str();
    return code == 0 ? kExitOk : kExitUsage;
  }

  RunConfig config;
  try {
    if (!config_path.empty()) config = load_run_config(config_path);
    for (const auto& [key, value] : flags) config.set(key, value);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      config.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  if (train_cmd->parsed()) return cmd_train(config, out, err);
  if (finetune_cmd->parsed()) return cmd_finetune(config, out, err);
  if (predict_cmd->parsed()) return cmd_predict(config, images, out, err);
  if (evaluate_cmd->parsed()) return cmd_evaluate(config, out, err);
  return cmd_validate_manifest(config, out, err);
}

}  // namespace sentinet::cli
