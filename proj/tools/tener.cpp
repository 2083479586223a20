#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "tener/checkpoint.hpp"
#include "tener/config.hpp"
#include "tener/data.hpp"
#include "tener/diagnostics.hpp"
#include "tener/model.hpp"
#include "tener/positional.hpp"
#include "tener/synth.hpp"
#include "tener/training.hpp"

namespace fs = std::filesystem;
using namespace tener;

namespace {

// Bad invocations (missing files, invalid settings) exit 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

const std::map<std::string, std::string>& key_help() {
  static const std::map<std::string, std::string> help = {
      {"word_dim", "word embedding width"},
      {"min_word_freq", "minimum training frequency for a word to enter the vocabulary"},
      {"char_encoder", "character encoder: none|cnn|bilstm|transformer|adapted"},
      {"char_emb_dim", "character embedding width"},
      {"char_kernel_size", "CNN kernel width"},
      {"char_kernels", "CNN kernel count"},
      {"char_stride", "CNN stride"},
      {"char_lstm_hidden", "BiLSTM hidden size per direction"},
      {"char_heads", "character Transformer heads"},
      {"char_head_dim", "character Transformer head width"},
      {"char_d_ff", "character Transformer feed-forward width"},
      {"char_dropout", "character Transformer dropout"},
      {"char_output_dim", "character feature width after projection (0 = no projection)"},
      {"max_word_len", "characters kept per word"},
      {"encoder", "attention mode: adapted (relative, no key/output projection) or vanilla"},
      {"scaled", "divide attention scores by sqrt(head_dim): true|false"},
      {"layers", "encoder layers"},
      {"heads", "attention heads"},
      {"d_model", "encoder width (heads x head_dim)"},
      {"head_dim", "width of one attention head"},
      {"d_ff", "feed-forward inner width"},
      {"attn_dropout", "dropout on attention weights"},
      {"ffn_dropout", "dropout inside the feed-forward sublayer"},
      {"projection_bias", "biases on vanilla Q/K/V/O projections: true|false"},
      {"max_len", "longest sentence the position tables cover"},
      {"fc_dropout", "dropout before the emission layer"},
      {"epochs", "training epochs"},
      {"batch_size", "sentences per batch"},
      {"lr", "peak learning rate of the triangular schedule"},
      {"momentum", "SGD momentum"},
      {"warmup_fraction", "fraction of steps spent warming up"},
      {"clip_norm", "global gradient-norm clip (0 disables)"},
      {"seed", "run seed; every random stream derives from it"},
      {"shuffle", "reshuffle training data each epoch: true|false"},
  };
  return help;
}

std::string flag_name(const std::string& key) {
  std::string f = key;
  std::replace(f.begin(), f.end(), '_', '-');
  return "--" + f;
}

/// Registers one string flag per settings key; only flags given on the
/// command line end up in the returned overrides.
struct SettingsFlags {
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;
  std::string config_path;

  void add_to(CLI::App& app) {
    app.add_option("--config", config_path, "key = value config file; flags override it");
    const auto defaults = Settings().to_key_values();
    for (const auto& [key, help] : key_help()) {
      auto* opt = app.add_option(flag_name(key), values[key], help);
      opt->default_str(defaults.get(key));
      options[key] = opt;
    }
  }

  Settings resolve() const {
    KeyValues kv = Settings().to_key_values();
    if (!config_path.empty()) {
      if (!fs::exists(config_path)) throw UsageError("config file not found: " + config_path);
      try {
        kv = kv.merged(read_key_values(config_path));
      } catch (const ParseError& e) {
        throw UsageError(e.what());
      }
    }
    KeyValues flags;
    for (const auto& [key, opt] : options)
      if (opt->count()) flags.set(key, values.at(key));
    Settings s = Settings::from_key_values(kv.merged(flags));
    s.validate();
    return s;
  }
};

std::vector<LabeledSentence> load_corpus(const std::string& path, const char* role) {
  if (!fs::exists(path)) throw UsageError(std::string(role) + " file not found: " + path);
  auto prepared = prepare_corpus(read_column_file(path));
  if (prepared.repairs)
    std::cerr << path << ": repaired " << prepared.repairs << " orphan I- label(s)\n";
  return std::move(prepared.sentences);
}

std::string fmt(Scalar v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

NerTagger load_model(const std::string& path) {
  if (!fs::exists(path)) throw UsageError("checkpoint not found: " + path);
  return model_from_checkpoint(load_checkpoint(path));
}

/// Output file or stdout.
class Sink {
 public:
  explicit Sink(const std::string& path) {
    if (!path.empty()) {
      file_.open(path);
      if (!file_) throw std::runtime_error("cannot write '" + path + "'");
    }
  }
  std::ostream& get() { return file_.is_open() ? static_cast<std::ostream&>(file_) : std::cout; }

 private:
  std::ofstream file_;
};

// ------------------------------------------------------------------ train

struct TrainArgs {
  std::string train, dev, test, embeddings, out = "model.ckpt", metrics;
  SettingsFlags settings;
};

int cmd_train(const TrainArgs& a) {
  const Settings s = a.settings.resolve();
  auto train_data = load_corpus(a.train, "train");
  std::vector<LabeledSentence> dev_data, test_data;
  if (!a.dev.empty()) dev_data = load_corpus(a.dev, "dev");
  if (!a.test.empty()) test_data = load_corpus(a.test, "test");
  if (!a.embeddings.empty() && !fs::exists(a.embeddings))
    throw UsageError("embedding file not found: " + a.embeddings);
  if (train_data.empty()) throw std::runtime_error(a.train + ": no sentences");

  auto words = build_word_vocabulary(train_data, s.min_word_freq);
  auto chars = build_char_vocabulary(train_data);
  auto labels = build_label_set(train_data);
  std::optional<EmbeddingMatrix> pretrained;
  if (!a.embeddings.empty()) {
    std::mt19937_64 rng(derive_seed(s.train.seed, "embeddings"));
    pretrained = load_embeddings(a.embeddings, words, s.model.word_dim, rng);
    std::cerr << "embeddings: " << pretrained->exact_hits << " exact, " << pretrained->lowercase_hits
              << " lowercase, " << pretrained->missing << " missing (coverage "
              << fmt(pretrained->coverage()) << ")\n";
  }
  NerTagger model(s.model, std::move(words), std::move(chars), std::move(labels), s.train.seed,
                  pretrained ? &*pretrained : nullptr);

  const std::string metrics_path = a.metrics.empty() ? a.out + ".metrics.csv" : a.metrics;
  std::ofstream metrics(metrics_path);
  if (!metrics) throw std::runtime_error("cannot write metrics log '" + metrics_path + "'");
  write_metrics_header(metrics);
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& r) {
    write_metrics_row(metrics, r);
    metrics.flush();
    std::cerr << "epoch " << r.epoch << " loss " << fmt(r.train_loss) << " dev_f1 " << fmt(r.dev.f1)
              << '\n';
  };
  auto result = train(model, s.train, train_data, dev_data, hooks);
  save_checkpoint(make_checkpoint(model, s, result.history), a.out);
  std::cout << "best dev F1 " << fmt(result.best_dev_f1) << " (epoch " << result.best_epoch << ")\n";
  if (!test_data.empty())
    std::cout << "test F1 " << fmt(evaluate(model, test_data).overall.f1) << '\n';
  std::cout << "checkpoint " << a.out << '\n';
  return 0;
}

// ------------------------------------------------------------------- eval

struct EvalArgs {
  std::string checkpoint, data;
  bool per_type = false;
};

std::string join(const std::set<std::string>& s) {
  std::string out;
  for (const auto& x : s) out += (out.empty() ? "" : ", ") + x;
  return out;
}

int cmd_eval(const EvalArgs& a) {
  auto model = load_model(a.checkpoint);
  auto data = load_corpus(a.data, "data");
  const std::set<std::string> known(model.labels().begin(), model.labels().end());
  std::set<std::string> seen, unknown;
  for (const auto& s : data)
    for (const auto& l : s.labels) {
      seen.insert(l);
      if (!known.count(l)) unknown.insert(l);
    }
  if (!unknown.empty()) {
    std::set<std::string> unused;
    for (const auto& l : known)
      if (!seen.count(l)) unused.insert(l);
    throw std::runtime_error("label set mismatch: data has labels unknown to the checkpoint [" +
                             join(unknown) + "]; checkpoint labels absent from data [" +
                             join(unused) + "]");
  }
  auto ev = evaluate(model, data);
  std::cout << "precision " << fmt(ev.overall.precision) << "\nrecall " << fmt(ev.overall.recall)
            << "\nf1 " << fmt(ev.overall.f1) << '\n';
  if (a.per_type) {
    std::cout << "type,precision,recall,f1,gold\n";
    for (const auto& [type, sc] : ev.per_type)
      std::cout << type << ',' << fmt(sc.precision) << ',' << fmt(sc.recall) << ',' << fmt(sc.f1)
                << ',' << sc.gold << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------- predict

struct PredictArgs {
  std::string checkpoint, input, out;
  bool conll = false;
};

int cmd_predict(const PredictArgs& a) {
  auto model = load_model(a.checkpoint);
  std::ifstream file;
  if (!a.input.empty()) {
    if (!fs::exists(a.input)) throw UsageError("input file not found: " + a.input);
    file.open(a.input);
  }
  std::istream& in = a.input.empty() ? std::cin : file;
  std::vector<std::vector<std::string>> sentences;
  if (a.conll) {
    for (auto& s : parse_columns(in, a.input.empty() ? "<stdin>" : a.input)) sentences.push_back(std::move(s.tokens));
  } else {
    std::string line;
    while (std::getline(in, line)) {
      std::istringstream ls(line);
      std::vector<std::string> tokens;
      for (std::string t; ls >> t;) tokens.push_back(t);
      if (!tokens.empty()) sentences.push_back(std::move(tokens));
    }
  }
  Sink sink(a.out);
  auto& os = sink.get();
  bool first = true;
  for (const auto& tokens : sentences) {
    std::vector<std::string> normalized;
    for (const auto& t : tokens) normalized.push_back(digit_normalize(t));
    const auto labels = model.predict(normalized);
    if (!first) os << '\n';
    first = false;
    for (std::size_t i = 0; i < tokens.size(); ++i) os << tokens[i] << ' ' << labels[i] << '\n';
  }
  return 0;
}

// --------------------------------------------------------------- diagnose

struct DiagnoseArgs {
  std::string kind, checkpoint, data, out;
  std::size_t dim = 512;
  std::int64_t k_min = -100, k_max = 100, t = 100;
  std::uint64_t seed = 1;
};

int cmd_diagnose(const DiagnoseArgs& a) {
  Sink sink(a.out);
  if (a.kind == "pe_curve") {
    auto& os = sink.get();
    os << "k,dot\n";
    os.precision(17);
    for (const auto& p : pe_dot_curve(a.dim, a.k_min, a.k_max, a.t)) os << p.k << ',' << p.value << '\n';
    return 0;
  }
  if (a.kind == "pe_projected") {
    write_pe_curve_csv(sink.get(), pe_dot_curve(a.dim, a.k_min, a.k_max, a.t),
                       pe_projected_dot_curve(a.dim, a.k_min, a.k_max, a.seed, a.t), a.seed);
    return 0;
  }
  // attention_entropy
  if (a.checkpoint.empty()) throw UsageError("attention_entropy needs --checkpoint");
  if (a.data.empty()) throw UsageError("attention_entropy needs --data");
  auto model = load_model(a.checkpoint);
  write_entropy_csv(sink.get(), attention_entropy(model, load_corpus(a.data, "data")));
  return 0;
}

// ------------------------------------------------------------------ synth

struct SynthArgs {
  std::string task = "directional", out;
  std::size_t size = 2000;
  std::uint64_t seed = 1;
};

int cmd_synth(const SynthArgs& a) {
  const auto task = parse_synth_task(a.task);
  if (a.size < 50) throw UsageError("--size must be at least 50");
  write_synth_corpus(synth_corpus(task, a.size, a.seed), a.out);
  std::cout << "wrote " << a.size << '/' << a.size / 10 << '/' << a.size / 10
            << " sentences to " << a.out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transformer-CRF named entity tagger"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "train a tagger and write a checkpoint");
  train_cmd->add_option("--train", train_args.train, "training corpus (column format)")->required();
  train_cmd->add_option("--dev", train_args.dev, "development corpus for model selection");
  train_cmd->add_option("--test", train_args.test, "test corpus scored with the selected model");
  train_cmd->add_option("--embeddings", train_args.embeddings,
                        "pre-trained word vectors, one `token v1 .. vdim` per line");
  train_cmd->add_option("--out", train_args.out, "checkpoint path")->capture_default_str();
  train_cmd->add_option("--metrics", train_args.metrics, "metrics log (default <out>.metrics.csv)");
  train_args.settings.add_to(*train_cmd);

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint on a labeled corpus");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "checkpoint path")->required();
  eval_cmd->add_option("--data", eval_args.data, "labeled corpus (column format)")->required();
  eval_cmd->add_flag("--per-type", eval_args.per_type, "also print one row per entity type");

  PredictArgs predict_args;
  auto* predict_cmd = app.add_subcommand("predict", "tag sentences with a checkpoint");
  predict_cmd->add_option("--checkpoint", predict_args.checkpoint, "checkpoint path")->required();
  predict_cmd->add_option("--input", predict_args.input,
                          "input file, one whitespace-tokenized sentence per line (default stdin)");
  predict_cmd->add_flag("--conll", predict_args.conll, "input is column format; first column is the token");
  predict_cmd->add_option("--out", predict_args.out, "output path (default stdout)");

  DiagnoseArgs diag_args;
  auto* diag_cmd = app.add_subcommand("diagnose", "positional-encoding and attention diagnostics as CSV");
  diag_cmd->add_option("kind", diag_args.kind, "pe_curve | pe_projected | attention_entropy")
      ->required()
      ->check(CLI::IsMember({"pe_curve", "pe_projected", "attention_entropy"}));
  diag_cmd->add_option("--dim", diag_args.dim, "embedding width")->capture_default_str();
  diag_cmd->add_option("--k-min", diag_args.k_min, "smallest offset")->capture_default_str();
  diag_cmd->add_option("--k-max", diag_args.k_max, "largest offset")->capture_default_str();
  diag_cmd->add_option("--t", diag_args.t, "reference position")->capture_default_str();
  diag_cmd->add_option("--seed", diag_args.seed, "seed of the random projection")->capture_default_str();
  diag_cmd->add_option("--checkpoint", diag_args.checkpoint, "checkpoint (attention_entropy)");
  diag_cmd->add_option("--data", diag_args.data, "corpus to run (attention_entropy)");
  diag_cmd->add_option("--out", diag_args.out, "output path (default stdout)");

  SynthArgs synth_args;
  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic train/dev/test corpus");
  synth_cmd->add_option("--task", synth_args.task, "directional | copy_pattern")
      ->capture_default_str()
      ->check(CLI::IsMember({"directional", "copy_pattern"}));
  synth_cmd->add_option("--size", synth_args.size, "training sentences; dev and test get size/10")
      ->capture_default_str();
  synth_cmd->add_option("--seed", synth_args.seed, "generator seed")->capture_default_str();
  synth_cmd->add_option("--out", synth_args.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train_cmd) return cmd_train(train_args);
    if (*eval_cmd) return cmd_eval(eval_args);
    if (*predict_cmd) return cmd_predict(predict_args);
    if (*diag_cmd) return cmd_diagnose(diag_args);
    if (*synth_cmd) return cmd_synth(synth_args);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
