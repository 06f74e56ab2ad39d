// Disease semantic graph: per-class description corpora are embedded by the
// frozen text encoder, averaged into class-mean teacher embeddings, turned
// into a row-stochastic cosine adjacency, and used to regularize the student
// text features with a Laplacian structural term.
#pragma once

#include <fstream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mvsl/autodiff.hpp"
#include "mvsl/encoders.hpp"
#include "mvsl/errors.hpp"
#include "mvsl/tensor.hpp"

namespace mvsl::dsg {

// ---- domain types --------------------------------------------------------

struct PromptCorpus {
  std::string modality;
  std::vector<std::string> class_names;            // C entries, unique, ordered
  std::vector<std::vector<std::string>> prompts;   // C lists, all the same length Num

  int n_classes() const { return static_cast<int>(class_names.size()); }
  int n_prompts() const { return prompts.empty() ? 0 : static_cast<int>(prompts[0].size()); }

  void validate() const {
    if (class_names.empty()) throw InputError("PromptCorpus: no classes");
    if (prompts.size() != class_names.size())
      throw InputError("PromptCorpus: prompt lists do not align with class names");
    std::set<std::string> seen;
    for (const auto& n : class_names)
      if (!seen.insert(n).second)
        throw InputError("PromptCorpus: duplicate class name '" + n + "'");
    const std::size_t num = prompts[0].size();
    for (std::size_t c = 0; c < prompts.size(); ++c) {
      if (prompts[c].empty())
        throw InputError("PromptCorpus: class '" + class_names[c] + "' has no prompts");
      if (prompts[c].size() != num)
        throw InputError("PromptCorpus: ragged prompt counts — class '" + class_names[c] +
                         "' has " + std::to_string(prompts[c].size()) + ", expected " +
                         std::to_string(num));
      for (const auto& p : prompts[c])
        if (p.empty())
          throw InputError("PromptCorpus: empty prompt under class '" + class_names[c] + "'");
    }
  }

  bool operator==(const PromptCorpus&) const = default;
};

struct TeacherTextEmbeddings {
  Array3 per_prompt;  // Num x C x D
  Mat class_mean;     // C x D
};

struct SemanticGraph {
  Mat g;  // C x C, rows sum to 1
  double tau_graph = 1.0;
  std::vector<std::string> class_names;  // optional provenance for export
};

// ---- corpus file I/O -------------------------------------------------------

inline PromptCorpus load_prompt_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_prompt_corpus: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("load_prompt_corpus: '" + path + "' is not valid JSON: " + e.what());
  }
  PromptCorpus c;
  try {
    c.modality = j.value("modality", std::string{});
    if (!j.contains("classes") || !j["classes"].is_array())
      throw InputError("load_prompt_corpus: missing 'classes' array");
    for (const auto& cls : j["classes"]) {
      c.class_names.push_back(cls.at("name").get<std::string>());
      c.prompts.push_back(cls.at("prompts").get<std::vector<std::string>>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("load_prompt_corpus: malformed corpus: ") + e.what());
  }
  c.validate();
  return c;
}

inline void save_prompt_corpus(const PromptCorpus& c, const std::string& path) {
  c.validate();
  nlohmann::json j;
  j["modality"] = c.modality;
  j["classes"] = nlohmann::json::array();
  for (std::size_t i = 0; i < c.class_names.size(); ++i)
    j["classes"].push_back({{"name", c.class_names[i]}, {"prompts", c.prompts[i]}});
  std::ofstream out(path);
  if (!out) throw IoError("save_prompt_corpus: cannot write '" + path + "'");
  out << j.dump(2) << '\n';
}

// ---- teacher embeddings ----------------------------------------------------

inline TeacherTextEmbeddings embed_corpus(const enc::TextEncoder& te, const PromptCorpus& corpus) {
  corpus.validate();
  const int c_count = corpus.n_classes();
  const int num = corpus.n_prompts();
  TeacherTextEmbeddings out;
  out.per_prompt = Array3(num, c_count, te.cfg.embed_dim);
  out.class_mean = Mat::Zero(c_count, te.cfg.embed_dim);
  for (int c = 0; c < c_count; ++c) {
    for (int p = 0; p < num; ++p) {
      enc::TokenSequence seq;
      try {
        seq = enc::tokenize(corpus.prompts[static_cast<std::size_t>(c)][static_cast<std::size_t>(p)],
                            te.cfg);
      } catch (const InputError& e) {
        throw InputError("embed_corpus: prompt " + std::to_string(p) + " of class '" +
                         corpus.class_names[static_cast<std::size_t>(c)] + "': " + e.what());
      }
      Mat row = enc::encode_text_frozen(te, {seq});
      for (int j = 0; j < te.cfg.embed_dim; ++j) out.per_prompt.at(p, c, j) = row(0, j);
      out.class_mean.row(c) += row.row(0);
    }
    out.class_mean.row(c) /= static_cast<double>(num);
  }
  return out;
}

// ---- adjacency ---------------------------------------------------------------

inline SemanticGraph build_adjacency(const Mat& class_mean, double tau_graph) {
  if (tau_graph <= 0.0) throw ConfigError("build_adjacency: tau_graph must be positive");
  if (class_mean.rows() < 1) throw InputError("build_adjacency: need at least one class");
  ad::Graph g;
  ad::Var m = g.constant_ref(class_mean);
  ad::Var n = g.l2_normalize_rows(m);  // zero-norm row raises NumericError
  ad::Var cos = g.matmul_nt(n, n);
  ad::Var adj = g.softmax_rows(g.scale(cos, 1.0 / tau_graph));
  SemanticGraph out;
  out.g = g.val(adj);
  out.tau_graph = tau_graph;
  return out;
}

// ---- Laplacian structural loss ---------------------------------------------

// graph composite: (1/C^2) sum_ij G[i,j] ||f_i - f_j||^2 with G constant.
inline ad::Var dsg_loss_var(ad::Graph& g, ad::Var student, const SemanticGraph& graph) {
  const Mat& f = g.val(student);
  if (graph.g.rows() != f.rows() || graph.g.rows() != graph.g.cols())
    throw InputError("dsg_loss: graph shape does not match student features");
  return g.pairwise_weighted_sqdist(student, g.constant_ref(graph.g));
}

inline double dsg_loss(const Mat& student, const SemanticGraph& graph) {
  ad::Graph g;
  return g.val(dsg_loss_var(g, g.constant_ref(student), graph))(0, 0);
}

// ---- graph export -------------------------------------------------------------

inline void save_graph(const SemanticGraph& graph, const std::string& path) {
  nlohmann::json j;
  j["class_names"] = graph.class_names;
  j["tau"] = graph.tau_graph;
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(graph.g.size()));
  for (Eigen::Index i = 0; i < graph.g.rows(); ++i)
    for (Eigen::Index k = 0; k < graph.g.cols(); ++k) flat.push_back(graph.g(i, k));
  j["G"] = flat;
  std::ofstream out(path);
  if (!out) throw IoError("save_graph: cannot write '" + path + "'");
  out << j.dump(2) << '\n';
}

}  // namespace mvsl::dsg
