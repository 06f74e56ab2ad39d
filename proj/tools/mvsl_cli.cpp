// mvsl command-line surface: synthetic data generation, few-shot / base-to-novel
// training, evaluation with JSON reports and SVG plots, semantic-graph export,
// and gradient checking.
//
// Exit codes: 0 success, 1 I/O error, 2 validation or usage error,
//             3 training aborted on a non-finite loss (last finite state saved),
//             4 incompatible artifacts (checkpoint/data mismatch, corrupt file),
//             5 numeric failure (gradient check). Errors go to stderr; stdout of
//             `eval` and `graph` carries only machine-readable JSON.
//
// MVSL_LOG={quiet|info|debug} controls stderr logging (default info). Artifacts
// contain no timestamps: identical flags and inputs give byte-identical outputs.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mvsl/data.hpp"
#include "mvsl/dsg.hpp"
#include "mvsl/encoders.hpp"
#include "mvsl/errors.hpp"
#include "mvsl/training.hpp"

namespace {

using nlohmann::json;

constexpr int kExitIo = 1;
constexpr int kExitUsage = 2;
constexpr int kExitAborted = 3;
constexpr int kExitIncompat = 4;
constexpr int kExitNumeric = 5;

// ---- logging (stderr only) -----------------------------------------------------------

int log_level() {
  static const int lvl = [] {
    const char* v = std::getenv("MVSL_LOG");
    if (!v) return 1;
    const std::string s(v);
    if (s == "quiet") return 0;
    if (s == "debug") return 2;
    return 1;  // "info" and anything unrecognized
  }();
  return lvl;
}

void log_info(const std::string& m) {
  if (log_level() >= 1) std::cerr << "[mvsl] " << m << '\n';
}

void log_debug(const std::string& m) {
  if (log_level() >= 2) std::cerr << "[mvsl:debug] " << m << '\n';
}

std::string fmt_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---- config resolution -----------------------------------------------------------------

// A fully resolved run configuration. Precedence: built-in defaults, then the
// --config file, then named flags, then --set overrides (last wins).
struct Resolved {
  mvsl::enc::EncoderConfig enc;
  mvsl::training::TrainConfig train;
  std::string dataset;    // informational tag carried by config files
  std::string benchmark;  // informational tag carried by config files
  bool epochs_set = false;
};

mvsl::training::Paradigm parse_paradigm(const std::string& s, const std::string& key) {
  using P = mvsl::training::Paradigm;
  if (s == "prompt") return P::prompt;
  if (s == "adapter") return P::adapter;
  if (s == "none") return P::none;
  throw mvsl::ConfigError("config: '" + key + "' must be prompt|adapter|none, got '" + s + "'");
}

mvsl::training::Ablate parse_ablate(const std::string& s) {
  using A = mvsl::training::Ablate;
  if (s == "baseline") return A::baseline;
  if (s == "mgcl") return A::mgcl;
  if (s == "dsg") return A::dsg;
  if (s == "full") return A::full;
  throw mvsl::ConfigError("config: 'ablate' must be baseline|mgcl|dsg|full, got '" + s + "'");
}

mvsl::training::Schedule parse_schedule(const std::string& s) {
  using S = mvsl::training::Schedule;
  if (s == "constant") return S::constant;
  if (s == "cosine") return S::cosine;
  throw mvsl::ConfigError("config: 'lr_schedule' must be constant|cosine, got '" + s + "'");
}

double as_number(const json& v, const std::string& key) {
  if (!v.is_number()) throw mvsl::ConfigError("config: key '" + key + "' expects a number");
  return v.get<double>();
}

int as_int(const json& v, const std::string& key) {
  if (!v.is_number_integer())
    throw mvsl::ConfigError("config: key '" + key + "' expects an integer");
  return v.get<int>();
}

std::uint64_t as_u64(const json& v, const std::string& key) {
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
    throw mvsl::ConfigError("config: key '" + key + "' expects a nonnegative integer");
  return v.get<std::uint64_t>();
}

bool as_bool(const json& v, const std::string& key) {
  if (!v.is_boolean()) throw mvsl::ConfigError("config: key '" + key + "' expects true or false");
  return v.get<bool>();
}

std::string as_string(const json& v, const std::string& key) {
  if (!v.is_string()) throw mvsl::ConfigError("config: key '" + key + "' expects a string");
  return v.get<std::string>();
}

void apply_encoder_key(Resolved& r, const std::string& key, const json& v) {
  auto& e = r.enc;
  if (key == "seed") e.seed = as_u64(v, key);
  else if (key == "image_side") e.image_side = as_int(v, key);
  else if (key == "patch_side") e.patch_side = as_int(v, key);
  else if (key == "channels") e.channels = as_int(v, key);
  else if (key == "n_blocks") e.n_blocks = as_int(v, key);
  else if (key == "block_dim") e.block_dim = as_int(v, key);
  else if (key == "embed_dim") e.embed_dim = as_int(v, key);
  else if (key == "n_heads") e.n_heads = as_int(v, key);
  else if (key == "vocab_size") e.vocab_size = as_int(v, key);
  else if (key == "max_text_len") e.max_text_len = as_int(v, key);
  else throw mvsl::ConfigError("config: unknown encoder key '" + key + "'");
}

void apply_train_key(Resolved& r, const std::string& key, const json& v) {
  auto& t = r.train;
  if (key == "learning_rate") t.learning_rate = as_number(v, key);
  else if (key == "batch_size") t.batch_size = as_int(v, key);
  else if (key == "epochs") { t.epochs = as_int(v, key); r.epochs_set = true; }
  else if (key == "momentum") t.momentum = as_number(v, key);
  else if (key == "lr_schedule") t.lr_schedule = parse_schedule(as_string(v, key));
  else if (key == "seed") t.seed = as_u64(v, key);
  else if (key == "lambda1") t.weights.set_lambda1(as_number(v, key));
  else if (key == "lambda2") t.weights.lambda2 = as_number(v, key);
  else if (key == "lambda3") t.weights.lambda3 = as_number(v, key);
  else if (key == "tie_lambda13") t.weights.tie_lambda13 = as_bool(v, key);
  else if (key == "tau_contrastive") t.temperatures.tau_contrastive = as_number(v, key);
  else if (key == "tau_graph") t.temperatures.tau_graph = as_number(v, key);
  else if (key == "tau_kl") t.temperatures.tau_kl = as_number(v, key);
  else if (key == "fusion_loss_weight") t.fusion_loss_weight = as_number(v, key);
  else if (key == "text_mode") t.text_mode = parse_paradigm(as_string(v, key), key);
  else if (key == "image_mode") t.image_mode = parse_paradigm(as_string(v, key), key);
  else if (key == "ablate") t.ablate = parse_ablate(as_string(v, key));
  else if (key == "alpha") t.alpha = as_number(v, key);
  else if (key == "learnable_alpha") t.learnable_alpha = as_bool(v, key);
  else if (key == "adapter_blocks") {
    if (!v.is_array()) throw mvsl::ConfigError("config: 'adapter_blocks' expects an array");
    t.adapter_blocks.clear();
    for (const auto& x : v) t.adapter_blocks.push_back(as_int(x, key));
  } else if (key == "image_prompt_count") t.image_prompt_count = as_int(v, key);
  else if (key == "prompt_init_phrase") t.prompt_init_phrase = as_string(v, key);
  else if (key == "corrupt_step") t.corrupt_step = as_int(v, key);
  else if (key == "dataset") r.dataset = as_string(v, key);
  else if (key == "benchmark") r.benchmark = as_string(v, key);
  else throw mvsl::ConfigError("config: unknown key '" + key + "'");
}

void apply_config_object(Resolved& r, const json& j) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() == "encoder") {
      if (!it.value().is_object())
        throw mvsl::ConfigError("config: 'encoder' must be an object");
      for (auto e = it.value().begin(); e != it.value().end(); ++e)
        apply_encoder_key(r, e.key(), e.value());
    } else {
      apply_train_key(r, it.key(), it.value());
    }
  }
}

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw mvsl::IoError("cannot open '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw mvsl::ConfigError("config '" + path + "': " + e.what());
  }
  if (!j.is_object()) throw mvsl::ConfigError("config '" + path + "': top level must be an object");
  return j;
}

// --set key=value. The value is parsed as JSON when possible (numbers, bools,
// arrays), otherwise taken as a bare string; "encoder." prefixes address the
// encoder section.
void apply_set_override(Resolved& r, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0)
    throw mvsl::ConfigError("--set expects key=value, got '" + kv + "'");
  const std::string key = kv.substr(0, eq);
  const std::string raw = kv.substr(eq + 1);
  json v;
  try {
    v = json::parse(raw);
  } catch (const json::exception&) {
    v = json(raw);
  }
  if (key.rfind("encoder.", 0) == 0) apply_encoder_key(r, key.substr(8), v);
  else apply_train_key(r, key, v);
}

json encoder_to_json(const mvsl::enc::EncoderConfig& e) {
  return json{{"seed", e.seed},           {"image_side", e.image_side},
              {"patch_side", e.patch_side}, {"channels", e.channels},
              {"n_blocks", e.n_blocks},   {"block_dim", e.block_dim},
              {"embed_dim", e.embed_dim}, {"n_heads", e.n_heads},
              {"vocab_size", e.vocab_size}, {"max_text_len", e.max_text_len}};
}

json train_to_json(const mvsl::training::TrainConfig& t) {
  using mvsl::training::to_string;
  return json{{"learning_rate", t.learning_rate},
              {"batch_size", t.batch_size},
              {"epochs", t.epochs},
              {"momentum", t.momentum},
              {"lr_schedule", to_string(t.lr_schedule)},
              {"seed", t.seed},
              {"lambda1", t.weights.lambda1},
              {"lambda2", t.weights.lambda2},
              {"lambda3", t.weights.lambda3},
              {"tie_lambda13", t.weights.tie_lambda13},
              {"tau_contrastive", t.temperatures.tau_contrastive},
              {"tau_graph", t.temperatures.tau_graph},
              {"tau_kl", t.temperatures.tau_kl},
              {"fusion_loss_weight", t.fusion_loss_weight},
              {"text_mode", to_string(t.text_mode)},
              {"image_mode", to_string(t.image_mode)},
              {"ablate", to_string(t.ablate)},
              {"alpha", t.alpha},
              {"learnable_alpha", t.learnable_alpha},
              {"adapter_blocks", t.adapter_blocks},
              {"image_prompt_count", t.image_prompt_count},
              {"prompt_init_phrase", t.prompt_init_phrase},
              {"corrupt_step", t.corrupt_step}};
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw mvsl::IoError("cannot write '" + path + "'");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw mvsl::IoError("short write to '" + path + "'");
}

void write_snapshot(const std::string& path, const json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

void write_loss_csv(const mvsl::Mat& h, const std::string& path) {
  std::ostringstream out;
  out << "step,total,global,local,mse,kl,dsg,fusion\n";
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    out << static_cast<long>(h(i, 0));
    for (Eigen::Index j = 1; j < h.cols(); ++j) out << ',' << fmt_g17(h(i, j));
    out << '\n';
  }
  write_text_file(path, out.str());
}

mvsl::dsg::PromptCorpus corpus_for(const mvsl::data::DatasetManifest& m) {
  if (m.prompt_corpus.empty())
    throw mvsl::InputError("manifest lists no prompt corpus; one is required");
  return mvsl::dsg::load_prompt_corpus(m.resolve(m.prompt_corpus));
}

std::vector<int> test_indices(const mvsl::data::DatasetManifest& m) {
  std::vector<int> idx;
  for (std::size_t i = 0; i < m.samples.size(); ++i)
    if (m.samples[i].split == "test") idx.push_back(static_cast<int>(i));
  if (idx.empty()) throw mvsl::InputError("manifest has no test-split samples");
  return idx;
}

std::vector<mvsl::enc::TokenSequence> class_sequences(const std::vector<std::string>& names,
                                                      const mvsl::enc::EncoderConfig& cfg) {
  std::vector<mvsl::enc::TokenSequence> seqs;
  seqs.reserve(names.size());
  for (const auto& n : names) seqs.push_back(mvsl::enc::tokenize(n, cfg));
  return seqs;
}

void check_batch_compat(const mvsl::enc::EncoderConfig& cfg, const mvsl::enc::ImageBatch& batch,
                        const std::string& who) {
  if (batch.side != cfg.image_side || batch.channels != cfg.channels)
    throw mvsl::IncompatError(who + ": dataset tensors (" + std::to_string(batch.channels) + "x" +
                              std::to_string(batch.side) + "x" + std::to_string(batch.side) +
                              ") do not match the encoder config (" +
                              std::to_string(cfg.channels) + "x" + std::to_string(cfg.image_side) +
                              "x" + std::to_string(cfg.image_side) + ")");
}

// ---- gen --------------------------------------------------------------------------------

struct GenArgs {
  int classes = 0;
  int per_class = 0;
  int side = 16;
  double sigma = 0.02;
  std::uint64_t seed = 1;
  std::string out;
};

int cmd_gen(const GenArgs& a) {
  auto m = mvsl::data::generate_synthetic(a.classes, a.per_class, a.sigma, a.seed, a.out, a.side);
  const json snap{{"command", "gen"},   {"classes", a.classes}, {"per_class", a.per_class},
                  {"sigma", a.sigma},   {"seed", a.seed},       {"side", a.side}};
  const auto dir = std::filesystem::path(a.out);
  write_snapshot((dir / "gen.config.json").string(), snap);
  log_info("generated " + std::to_string(m.samples.size()) + " samples over " +
           std::to_string(m.n_classes()) + " classes in '" + a.out + "'");
  std::cout << (dir / "manifest.json").string() << '\n';
  return 0;
}

// ---- train ------------------------------------------------------------------------------

struct TrainArgs {
  std::string data, config, out;
  std::string protocol = "fewshot";
  int shots = 16;
  std::uint64_t seed = 1;
  std::string ablate, text, image;
  double alpha = 0.5;
  std::vector<int> blocks;
  int epochs = 0;
  std::vector<std::string> sets;
  bool log_csv = false;
};

int cmd_train(const CLI::App& sub, const TrainArgs& a) {
  Resolved r;
  if (!a.config.empty()) apply_config_object(r, load_json_file(a.config));
  if (sub.count("--seed")) r.train.seed = a.seed;
  if (sub.count("--ablate")) r.train.ablate = parse_ablate(a.ablate);
  if (sub.count("--text")) r.train.text_mode = parse_paradigm(a.text, "text");
  if (sub.count("--image")) r.train.image_mode = parse_paradigm(a.image, "image");
  if (sub.count("--alpha")) r.train.alpha = a.alpha;
  if (sub.count("--blocks")) r.train.adapter_blocks = a.blocks;
  if (sub.count("--epochs")) {
    r.train.epochs = a.epochs;
    r.epochs_set = true;
  }
  for (const auto& kv : a.sets) apply_set_override(r, kv);
  if (!r.epochs_set) r.train.epochs = a.protocol == "base2novel" ? 50 : 100;
  r.train.validate();
  r.enc.validate();

  auto manifest = mvsl::data::load_manifest(a.data);
  auto corpus = corpus_for(manifest);
  mvsl::data::DatasetManifest train_m = manifest;
  if (a.protocol == "base2novel") {
    auto [base, novel] = mvsl::data::base_novel_split(manifest);
    (void)novel;
    train_m = std::move(base);
  }
  auto episode = mvsl::data::sample_episode(train_m, a.shots, r.train.seed);

  json snap;
  snap["command"] = "train";
  snap["data"] = a.data;
  snap["protocol"] = a.protocol;
  snap["shots"] = a.shots;
  snap["class_names"] = train_m.class_names;
  if (!r.dataset.empty()) snap["dataset"] = r.dataset;
  if (!r.benchmark.empty()) snap["benchmark"] = r.benchmark;
  snap["encoder"] = encoder_to_json(r.enc);
  snap["train"] = train_to_json(r.train);

  log_info("training: protocol=" + a.protocol + " shots=" + std::to_string(a.shots) +
           " classes=" + std::to_string(train_m.n_classes()) +
           " epochs=" + std::to_string(r.train.epochs) + " seed=" + std::to_string(r.train.seed));

  auto emit = [&](const mvsl::training::TrainedState& ts) {
    mvsl::training::save_checkpoint(ts, a.out);
    write_snapshot(a.out + ".config.json", snap);
    if (a.log_csv) write_loss_csv(ts.loss_history, a.out + ".loss.csv");
    if (log_level() >= 2) {
      const auto& h = ts.loss_history;
      for (Eigen::Index i = 0; i < h.rows(); ++i)
        log_debug("step=" + std::to_string(static_cast<long>(h(i, 0))) +
                  " total=" + fmt_g17(h(i, 1)) + " global=" + fmt_g17(h(i, 2)) +
                  " local=" + fmt_g17(h(i, 3)) + " mse=" + fmt_g17(h(i, 4)) +
                  " kl=" + fmt_g17(h(i, 5)) + " dsg=" + fmt_g17(h(i, 6)) +
                  " fusion=" + fmt_g17(h(i, 7)));
    }
  };

  try {
    auto ts = mvsl::training::train(r.train, r.enc, train_m, episode, corpus);
    ts.protocol = a.protocol;
    emit(ts);
    log_info("wrote checkpoint '" + a.out + "' (final epoch " +
             std::to_string(ts.final_epoch) + ")");
    return 0;
  } catch (mvsl::training::TrainingAborted& e) {
    e.last_good.protocol = a.protocol;
    emit(e.last_good);
    std::cerr << "[mvsl] error: " << e.what() << '\n';
    std::cerr << "[mvsl] last finite state saved to '" << a.out << "'\n";
    return kExitAborted;
  }
}

// ---- eval -------------------------------------------------------------------------------

struct EvalArgs {
  std::vector<std::string> ckpts;
  std::string data, protocol, out, plot;
};

// Deterministic accuracy-vs-K line plot; K values on a categorical axis,
// accuracy on [0, 100].
std::string render_accuracy_svg(const std::map<int, std::vector<double>>& by_k) {
  const double x0 = 56.0, x1 = 440.0, y0 = 24.0, y1 = 280.0;
  auto fmt1 = [](double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.1f", v);
    return std::string(b);
  };
  auto ypos = [&](double acc) { return y1 - acc / 100.0 * (y1 - y0); };
  const std::size_t n = by_k.size();
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"320\" "
       "viewBox=\"0 0 480 320\">\n";
  s << "<rect x=\"0\" y=\"0\" width=\"480\" height=\"320\" fill=\"white\"/>\n";
  s << "<text x=\"240\" y=\"16\" text-anchor=\"middle\" font-family=\"sans-serif\" "
       "font-size=\"12\">accuracy vs K</text>\n";
  for (int tick = 0; tick <= 100; tick += 25) {
    const std::string y = fmt1(ypos(tick));
    s << "<line x1=\"" << fmt1(x0) << "\" y1=\"" << y << "\" x2=\"" << fmt1(x1) << "\" y2=\"" << y
      << "\" stroke=\"#dddddd\"/>\n";
    s << "<text x=\"" << fmt1(x0 - 8.0) << "\" y=\"" << fmt1(ypos(tick) + 4.0)
      << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" << tick
      << "</text>\n";
  }
  s << "<line x1=\"" << fmt1(x0) << "\" y1=\"" << fmt1(y1) << "\" x2=\"" << fmt1(x1) << "\" y2=\""
    << fmt1(y1) << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << fmt1(x0) << "\" y1=\"" << fmt1(y0) << "\" x2=\"" << fmt1(x0) << "\" y2=\""
    << fmt1(y1) << "\" stroke=\"black\"/>\n";
  std::ostringstream pts;
  std::size_t i = 0;
  for (const auto& [k, accs] : by_k) {
    double mean = 0.0;
    for (double a : accs) mean += a;
    mean /= static_cast<double>(accs.size());
    const double x = n == 1 ? (x0 + x1) / 2.0
                            : x0 + (x1 - x0) * (static_cast<double>(i) + 0.5) /
                                       static_cast<double>(n);
    pts << (i ? " " : "") << fmt1(x) << ',' << fmt1(ypos(mean));
    s << "<circle cx=\"" << fmt1(x) << "\" cy=\"" << fmt1(ypos(mean))
      << "\" r=\"3\" fill=\"#3366cc\"/>\n";
    s << "<text x=\"" << fmt1(x) << "\" y=\"" << fmt1(y1 + 16.0)
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">K=" << k
      << "</text>\n";
    s << "<text x=\"" << fmt1(x) << "\" y=\"" << fmt1(ypos(mean) - 8.0)
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">" << fmt1(mean)
      << "</text>\n";
    ++i;
  }
  if (n > 1)
    s << "<polyline points=\"" << pts.str()
      << "\" fill=\"none\" stroke=\"#3366cc\" stroke-width=\"1.5\"/>\n";
  s << "</svg>\n";
  return s.str();
}

std::vector<double> mean_columns(const std::vector<std::vector<double>>& rows) {
  std::vector<double> out(rows.front().size(), 0.0);
  for (const auto& r : rows)
    for (std::size_t j = 0; j < r.size(); ++j) out[j] += r[j];
  for (auto& v : out) v /= static_cast<double>(rows.size());
  return out;
}

int cmd_eval(const EvalArgs& a) {
  auto manifest = mvsl::data::load_manifest(a.data);
  std::vector<mvsl::training::TrainedState> states;
  states.reserve(a.ckpts.size());
  for (const auto& p : a.ckpts) states.push_back(mvsl::training::load_checkpoint(p));
  const std::string protocol = a.protocol.empty() ? states.front().protocol : a.protocol;
  log_info("evaluating " + std::to_string(states.size()) + " checkpoint(s), protocol=" + protocol);

  mvsl::data::MetricsReport report;
  report.protocol = protocol;
  std::map<int, std::vector<double>> plot_points;  // K -> accuracies
  const mvsl::enc::EncoderConfig enc_cfg = states.front().model.enc_cfg;

  if (protocol == "zeroshot") {
    // Frozen-encoder path: checkpoint trainables are deliberately ignored, the
    // checkpoint only pins the encoder configuration.
    std::vector<int> labels;
    auto batch = mvsl::data::load_images(manifest, test_indices(manifest), &labels);
    check_batch_compat(enc_cfg, batch, "eval");
    auto [ve, te] = mvsl::enc::build_encoders(enc_cfg);
    auto corpus = corpus_for(manifest);
    auto preds = mvsl::training::zero_shot_labels(ve, te, batch, corpus, manifest.class_names);
    report.k = 0;
    report.acc = mvsl::data::accuracy(preds, labels);
    report.per_class = mvsl::data::per_class_accuracy(preds, labels, manifest.n_classes());
    plot_points[0].push_back(report.acc);
  } else if (protocol == "fewshot") {
    std::vector<int> labels;
    auto batch = mvsl::data::load_images(manifest, test_indices(manifest), &labels);
    std::vector<double> accs;
    std::vector<std::vector<double>> per_class_rows;
    std::set<int> shot_values;
    for (const auto& ts : states) {
      check_batch_compat(ts.model.enc_cfg, batch, "eval");
      if (ts.class_names != manifest.class_names)
        throw mvsl::IncompatError("eval: checkpoint class names do not match the manifest");
      auto [ve, te] = mvsl::enc::build_encoders(ts.model.enc_cfg);
      auto seqs = class_sequences(ts.class_names, ts.model.enc_cfg);
      auto preds = mvsl::training::predict_labels(ts.model, ts.config, ve, te, batch, seqs);
      const double acc = mvsl::data::accuracy(preds, labels);
      accs.push_back(acc);
      per_class_rows.push_back(
          mvsl::data::per_class_accuracy(preds, labels, manifest.n_classes()));
      report.seeds.push_back(ts.config.seed);
      shot_values.insert(ts.shots);
      plot_points[ts.shots].push_back(acc);
      log_debug("checkpoint seed=" + std::to_string(ts.config.seed) +
                " shots=" + std::to_string(ts.shots) + " accuracy=" + fmt_g17(acc));
    }
    report.k = shot_values.size() == 1 ? *shot_values.begin() : 0;
    report.acc = 0.0;
    for (double v : accs) report.acc += v;
    report.acc /= static_cast<double>(accs.size());
    report.per_class = mean_columns(per_class_rows);
  } else if (protocol == "base2novel") {
    auto [base_m, novel_m] = mvsl::data::base_novel_split(manifest);
    std::vector<int> base_labels, novel_labels;
    auto base_batch = mvsl::data::load_images(base_m, test_indices(base_m), &base_labels);
    auto novel_batch = mvsl::data::load_images(novel_m, test_indices(novel_m), &novel_labels);
    std::vector<double> base_accs, novel_accs;
    std::vector<std::vector<double>> per_class_rows;
    std::set<int> shot_values;
    for (const auto& ts : states) {
      check_batch_compat(ts.model.enc_cfg, base_batch, "eval");
      if (ts.class_names != base_m.class_names)
        throw mvsl::IncompatError(
            "eval: checkpoint was not trained on this manifest's base split");
      auto [ve, te] = mvsl::enc::build_encoders(ts.model.enc_cfg);
      // Base classes: seen during training. Novel classes: the trained prompts
      // and adapters transfer through the shared text pathway.
      auto base_preds = mvsl::training::predict_labels(
          ts.model, ts.config, ve, te, base_batch,
          class_sequences(base_m.class_names, ts.model.enc_cfg));
      auto novel_preds = mvsl::training::predict_labels(
          ts.model, ts.config, ve, te, novel_batch,
          class_sequences(novel_m.class_names, ts.model.enc_cfg));
      base_accs.push_back(mvsl::data::accuracy(base_preds, base_labels));
      novel_accs.push_back(mvsl::data::accuracy(novel_preds, novel_labels));
      std::vector<double> pc =
          mvsl::data::per_class_accuracy(base_preds, base_labels, base_m.n_classes());
      const auto pc_novel =
          mvsl::data::per_class_accuracy(novel_preds, novel_labels, novel_m.n_classes());
      pc.insert(pc.end(), pc_novel.begin(), pc_novel.end());
      per_class_rows.push_back(std::move(pc));
      report.seeds.push_back(ts.config.seed);
      shot_values.insert(ts.shots);
      log_debug("checkpoint seed=" + std::to_string(ts.config.seed) +
                " base=" + fmt_g17(base_accs.back()) + " novel=" + fmt_g17(novel_accs.back()));
    }
    report.k = shot_values.size() == 1 ? *shot_values.begin() : 0;
    report.has_base_novel = true;
    report.base = 0.0;
    for (double v : base_accs) report.base += v;
    report.base /= static_cast<double>(base_accs.size());
    report.novel = 0.0;
    for (double v : novel_accs) report.novel += v;
    report.novel /= static_cast<double>(novel_accs.size());
    report.hm = mvsl::data::harmonic_mean(report.base, report.novel);
    // Overall accuracy: sample-weighted across both halves, each half
    // predicted within its own label space.
    const double nb = static_cast<double>(base_labels.size());
    const double nn = static_cast<double>(novel_labels.size());
    report.acc = (report.base * nb + report.novel * nn) / (nb + nn);
    report.per_class = mean_columns(per_class_rows);
    plot_points[report.k].push_back(report.acc);
  } else {
    throw mvsl::ConfigError("eval: unknown protocol '" + protocol + "'");
  }

  json out = report.to_json();
  json cfg;
  cfg["command"] = "eval";
  cfg["protocol"] = protocol;
  cfg["data"] = a.data;
  cfg["ckpts"] = a.ckpts;
  cfg["encoder"] = encoder_to_json(enc_cfg);
  out["config"] = cfg;
  const std::string text = out.dump(2) + "\n";
  std::cout << text;
  if (!a.out.empty()) write_text_file(a.out, text);
  if (!a.plot.empty()) write_text_file(a.plot, render_accuracy_svg(plot_points));
  return 0;
}

// ---- graph ------------------------------------------------------------------------------

struct GraphArgs {
  std::string prompts, out, config;
  double tau = 1.0;
};

int cmd_graph(const GraphArgs& a) {
  Resolved r;
  if (!a.config.empty()) apply_config_object(r, load_json_file(a.config));
  r.enc.validate();
  auto corpus = mvsl::dsg::load_prompt_corpus(a.prompts);
  corpus.validate();
  auto [ve, te] = mvsl::enc::build_encoders(r.enc);
  (void)ve;
  auto emb = mvsl::dsg::embed_corpus(te, corpus);
  auto graph = mvsl::dsg::build_adjacency(emb.class_mean, a.tau);
  graph.class_names = corpus.class_names;
  mvsl::dsg::save_graph(graph, a.out);
  log_info("wrote adjacency (" + std::to_string(graph.g.rows()) + "x" +
           std::to_string(graph.g.cols()) + ") to '" + a.out + "'");

  json j;
  j["class_names"] = graph.class_names;
  j["tau"] = graph.tau_graph;
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(graph.g.size()));
  for (Eigen::Index i = 0; i < graph.g.rows(); ++i)
    for (Eigen::Index k = 0; k < graph.g.cols(); ++k) flat.push_back(graph.g(i, k));
  j["G"] = flat;
  j["config"] = json{{"command", "graph"},
                     {"prompts", a.prompts},
                     {"tau", a.tau},
                     {"encoder", encoder_to_json(r.enc)}};
  std::cout << j.dump(2) << '\n';
  return 0;
}

// ---- gradcheck --------------------------------------------------------------------------

struct GradArgs {
  std::uint64_t seed = 1;
  std::string config;
  bool corrupt = false;
};

int cmd_gradcheck(const CLI::App& sub, const GradArgs& a) {
  std::uint64_t seed = a.seed;
  if (!a.config.empty()) {
    Resolved r;
    apply_config_object(r, load_json_file(a.config));
    if (!sub.count("--seed")) seed = r.train.seed;
  }
  auto rep = mvsl::training::gradcheck(seed, a.corrupt);
  std::printf("gradient check: seed %llu, fd step %.1e, threshold %.1e\n",
              static_cast<unsigned long long>(seed), rep.fd_step, rep.threshold);
  std::printf("%-28s %14s  %s\n", "block", "max_rel_err", "status");
  for (const auto& b : rep.blocks)
    std::printf("%-28s %14.6e  %s\n", b.name.c_str(), b.max_rel_err, b.pass ? "pass" : "FAIL");
  std::printf("%-28s %14.6e  %s\n", "fd calibration (quadratic)", rep.calibration_err,
              rep.calibration_err < 1e-9 ? "pass" : "FAIL");
  std::printf("trainable scalars: %ld\n", rep.trainable_scalars);
  std::printf("overall: %s\n", rep.pass ? "PASS" : "FAIL");
  return rep.pass ? 0 : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "mvsl: cross-paradigm fine-tuning with multi-granularity contrastive alignment and "
      "semantic-graph distillation"};
  app.require_subcommand(1);

  GenArgs ga;
  auto* gen = app.add_subcommand("gen", "Generate a deterministic synthetic dataset");
  gen->add_option("--classes", ga.classes, "Number of classes")->required();
  gen->add_option("--per-class", ga.per_class, "Samples per class")->required();
  gen->add_option("--sigma", ga.sigma, "Within-class noise level")->capture_default_str();
  gen->add_option("--seed", ga.seed, "Generator seed")->capture_default_str();
  gen->add_option("--side", ga.side, "Image side length")->capture_default_str();
  gen->add_option("--out", ga.out, "Output directory")->required();

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train prompts/adapters on a few-shot episode");
  tr->add_option("--data", ta.data, "Dataset manifest JSON")->required();
  tr->add_option("--shots", ta.shots, "Support samples per class (K)")->capture_default_str();
  tr->add_option("--seed", ta.seed, "Training seed (overrides config)");
  tr->add_option("--config", ta.config, "JSON config overlay");
  tr->add_option("--out", ta.out, "Checkpoint output path")->required();
  tr->add_option("--protocol", ta.protocol, "fewshot | base2novel")
      ->check(CLI::IsMember({"fewshot", "base2novel"}))
      ->capture_default_str();
  tr->add_option("--ablate", ta.ablate, "Objective ablation")
      ->check(CLI::IsMember({"baseline", "mgcl", "dsg", "full"}));
  tr->add_option("--text", ta.text, "Text-branch paradigm")
      ->check(CLI::IsMember({"prompt", "adapter", "none"}));
  tr->add_option("--image", ta.image, "Image-branch paradigm")
      ->check(CLI::IsMember({"prompt", "adapter", "none"}));
  tr->add_option("--alpha", ta.alpha, "Residual blend weight in [0,1]");
  tr->add_option("--blocks", ta.blocks, "Adapter block indices, 1-based (e.g. 9,11)")
      ->delimiter(',');
  tr->add_option("--epochs", ta.epochs, "Epochs (default 100 fewshot / 50 base2novel)");
  tr->add_option("--set", ta.sets, "Config override key=value (repeatable)");
  tr->add_flag("--log", ta.log_csv, "Write a per-step loss CSV next to the checkpoint");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Evaluate checkpoints; JSON report on stdout");
  ev->add_option("--ckpt", ea.ckpts, "Checkpoint path (repeatable)")->required();
  ev->add_option("--data", ea.data, "Dataset manifest JSON")->required();
  ev->add_option("--protocol", ea.protocol, "fewshot | base2novel | zeroshot")
      ->check(CLI::IsMember({"fewshot", "base2novel", "zeroshot"}));
  ev->add_option("--out", ea.out, "Also write the JSON report here");
  ev->add_option("--plot", ea.plot, "Write an accuracy-vs-K SVG here");

  GraphArgs gra;
  auto* gr = app.add_subcommand("graph", "Export the class adjacency for a prompt corpus");
  gr->add_option("--prompts", gra.prompts, "Prompt corpus JSON")->required();
  gr->add_option("--tau", gra.tau, "Adjacency temperature")->capture_default_str();
  gr->add_option("--out", gra.out, "Graph JSON output path")->required();
  gr->add_option("--config", gra.config, "JSON config overlay (encoder section)");

  GradArgs gca;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every trainable block");
  gc->add_option("--seed", gca.seed, "Toy-instance seed")->capture_default_str();
  gc->add_option("--config", gca.config, "JSON config overlay (seed only)");
  gc->add_flag("--corrupt-analytic", gca.corrupt,
               "Test hook: perturb one analytic gradient to exercise failure reporting");

  int rc = 0;
  gen->callback([&] { rc = cmd_gen(ga); });
  tr->callback([&] { rc = cmd_train(*tr, ta); });
  ev->callback([&] { rc = cmd_eval(ea); });
  gr->callback([&] { rc = cmd_graph(gra); });
  gc->callback([&] { rc = cmd_gradcheck(*gc, gca); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  } catch (const mvsl::ConfigError& e) {
    std::cerr << "[mvsl] error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const mvsl::InputError& e) {
    std::cerr << "[mvsl] error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const mvsl::IncompatError& e) {
    std::cerr << "[mvsl] error: " << e.what() << '\n';
    return kExitIncompat;
  } catch (const mvsl::IoError& e) {
    std::cerr << "[mvsl] error: " << e.what() << '\n';
    return kExitIo;
  } catch (const mvsl::NumericError& e) {
    std::cerr << "[mvsl] error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const json::exception& e) {
    std::cerr << "[mvsl] error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "[mvsl] error: " << e.what() << '\n';
    return kExitIo;
  }
  return rc;
}
