#include "clims/config.hpp"

#include <json.hpp>

#include <fstream>
#include <set>
#include <sstream>

#include "clims/rng.hpp"

namespace clims {

using nlohmann::json;

void validate_loss_weights(const LossWeights& w) {
  require(w.alpha >= 0 && w.beta >= 0 && w.gamma >= 0 && w.delta >= 0,
          "loss_weights: alpha, beta, gamma, delta must be nonnegative");
}

void validate_config(const TrainConfig& cfg) {
  require(cfg.learning_rate > 0, "config: learning_rate must be > 0");
  require(cfg.weight_decay >= 0, "config: weight_decay must be >= 0");
  require(cfg.epochs >= 1, "config: epochs must be >= 1");
  require(cfg.batch_size >= 1, "config: batch_size must be >= 1");
  require(cfg.crop_size >= 8, "config: crop_size must be >= 8");
  require(cfg.similarity_clamp_epsilon > 0 && cfg.similarity_clamp_epsilon < 0.5,
          "config: similarity_clamp_epsilon must lie in (0, 0.5)");
  validate_loss_weights(cfg.loss_weights);
}

TrainConfig parse_config(const std::string& json_text) {
  json j;
  if (json_text.find_first_not_of(" \t\r\n") == std::string::npos) {
    j = json::object();  // empty file: all defaults
  } else {
    j = json::parse(json_text);
  }
  require(j.is_object(), "config: top-level value must be a JSON object");

  static const std::set<std::string> known = {
      "learning_rate", "weight_decay",  "epochs", "batch_size", "crop_size",
      "seed",          "similarity_clamp_epsilon", "alpha", "beta", "gamma", "delta"};
  for (const auto& item : j.items())
    require(known.count(item.key()) != 0, "config: unknown key \"" + item.key() + "\"");

  TrainConfig cfg;
  if (j.contains("learning_rate")) cfg.learning_rate = j["learning_rate"].get<real>();
  if (j.contains("weight_decay")) cfg.weight_decay = j["weight_decay"].get<real>();
  if (j.contains("epochs")) cfg.epochs = j["epochs"].get<int>();
  if (j.contains("batch_size")) cfg.batch_size = j["batch_size"].get<int>();
  if (j.contains("crop_size")) cfg.crop_size = j["crop_size"].get<int>();
  if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("similarity_clamp_epsilon"))
    cfg.similarity_clamp_epsilon = j["similarity_clamp_epsilon"].get<real>();
  if (j.contains("alpha")) cfg.loss_weights.alpha = j["alpha"].get<real>();
  if (j.contains("beta")) cfg.loss_weights.beta = j["beta"].get<real>();
  if (j.contains("gamma")) cfg.loss_weights.gamma = j["gamma"].get<real>();
  if (j.contains("delta")) cfg.loss_weights.delta = j["delta"].get<real>();

  validate_config(cfg);
  return cfg;
}

TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "config: cannot open \"" + path + "\"");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string serialize_config(const TrainConfig& cfg) {
  json j;
  j["learning_rate"] = cfg.learning_rate;
  j["weight_decay"] = cfg.weight_decay;
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["crop_size"] = cfg.crop_size;
  j["seed"] = cfg.seed;
  j["similarity_clamp_epsilon"] = cfg.similarity_clamp_epsilon;
  j["alpha"] = cfg.loss_weights.alpha;
  j["beta"] = cfg.loss_weights.beta;
  j["gamma"] = cfg.loss_weights.gamma;
  j["delta"] = cfg.loss_weights.delta;
  return j.dump(2);
}

void save_config(const TrainConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  require(out.good(), "config: cannot write \"" + path + "\"");
  out << serialize_config(cfg) << '\n';
}

std::uint64_t config_hash(const TrainConfig& cfg) { return fnv1a64(serialize_config(cfg)); }

std::string instantiate_template(const std::string& template_text, const std::string& name) {
  const auto pos = template_text.find("{}");
  require(pos != std::string::npos, "prompt template: missing \"{}\" placeholder");
  require(template_text.find("{}", pos + 2) == std::string::npos,
          "prompt template: more than one \"{}\" placeholder");
  std::string out = template_text;
  out.replace(pos, 2, name);
  return out;
}

PromptBook build_prompt_book(const std::vector<std::string>& class_names,
                             const std::map<std::string, std::vector<std::string>>& background_map,
                             const std::string& template_text) {
  require(!class_names.empty(), "prompt book: class list is empty");
  std::set<std::string> seen;
  for (const auto& name : class_names) {
    require(!name.empty(), "prompt book: empty class name");
    require(seen.insert(name).second, "prompt book: duplicate class name \"" + name + "\"");
  }
  instantiate_template(template_text, "probe");  // validates placeholder count

  PromptBook book;
  book.template_text = template_text;
  book.class_names = class_names;
  book.object_prompts.reserve(class_names.size());
  book.background_prompts.resize(class_names.size());
  for (std::size_t k = 0; k < class_names.size(); ++k) {
    book.object_prompts.push_back(instantiate_template(template_text, class_names[k]));
    if (auto it = background_map.find(class_names[k]); it != background_map.end())
      for (const auto& bg : it->second)
        book.background_prompts[k].push_back(instantiate_template(template_text, bg));
  }
  return book;
}

PromptBook load_prompt_book(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "prompt book: cannot open \"" + path + "\"");
  json j = json::parse(in);
  require(j.contains("template") && j.contains("classes"), "prompt book: need \"template\" and \"classes\"");
  std::map<std::string, std::vector<std::string>> bg;
  if (j.contains("backgrounds"))
    for (const auto& item : j["backgrounds"].items())
      bg[item.key()] = item.value().get<std::vector<std::string>>();
  return build_prompt_book(j["classes"].get<std::vector<std::string>>(), bg,
                           j["template"].get<std::string>());
}

void save_prompt_book(const PromptBook& book, const std::string& path) {
  json j;
  j["template"] = book.template_text;
  j["classes"] = book.class_names;
  json bg = json::object();
  for (int k = 0; k < book.class_count(); ++k) {
    if (book.background_prompts[static_cast<std::size_t>(k)].empty()) continue;
    // store the raw background names by stripping the template around them
    std::vector<std::string> names;
    const std::string probe = instantiate_template(book.template_text, "\x01");
    const auto pos = probe.find('\x01');
    for (const auto& prompt : book.background_prompts[static_cast<std::size_t>(k)]) {
      const std::size_t tail = probe.size() - pos - 1;
      names.push_back(prompt.substr(pos, prompt.size() - pos - tail));
    }
    bg[book.class_names[static_cast<std::size_t>(k)]] = names;
  }
  j["backgrounds"] = bg;
  std::ofstream out(path);
  require(out.good(), "prompt book: cannot write \"" + path + "\"");
  out << j.dump(2) << '\n';
}

std::map<std::string, std::vector<std::string>> default_background_map() {
  // v1: only the categories with published co-occurring background sets.
  return {
      {"train", {"railroad", "railway", "tree"}},
      {"boat", {"river", "sea", "lake"}},
  };
}

std::map<std::string, std::vector<std::string>> synthetic_background_map() {
  return {
      {"toy-train", {"railroad"}},
      {"toy-boat", {"river"}},
  };
}

}  // namespace clims
