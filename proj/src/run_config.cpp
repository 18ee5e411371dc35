#include <sacc/run_config.hpp>
#include <sacc/seeding.hpp>

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace sacc {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw ConfigError("config key '" + key + "': cannot read '" + value + "' as " + expected);
}

template <typename N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v, "a number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "true/false");
}

template <typename N>
std::string format_number(N v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(parse_number<int>(key, trim(item)));
  if (out.empty()) bad_value(key, v, "a comma-separated list");
  return out;
}

std::string format_int_list(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

template <typename N, typename Access>
Field number(Access access) {
  return {[access](const RunConfig& c) { return format_number(access(c)); },
          [access](RunConfig& c, const std::string& k, const std::string& v) { access(c) = parse_number<N>(k, v); }};
}

template <typename Access>
Field boolean(Access access) {
  return {[access](const RunConfig& c) { return std::string(access(c) ? "true" : "false"); },
          [access](RunConfig& c, const std::string& k, const std::string& v) { access(c) = parse_bool(k, v); }};
}

template <typename E, typename Access>
Field choice(Access access, std::vector<std::pair<std::string, E>> names) {
  return {[access, names](const RunConfig& c) {
            const E e = access(c);
            for (const auto& [n, v] : names)
              if (v == e) return n;
            return std::string("?");
          },
          [access, names](RunConfig& c, const std::string& k, const std::string& v) {
            for (const auto& [n, e] : names)
              if (n == v) {
                access(c) = e;
                return;
              }
            std::string opts;
            for (const auto& [n, e] : names) opts += (opts.empty() ? "" : "|") + n;
            bad_value(k, v, opts.c_str());
          }};
}

#define SACC_REF(expr) [](auto& c) -> auto& { return c.expr; }

const std::map<std::string, Field>& registry() {
  static const std::map<std::string, Field> fields = [] {
    std::map<std::string, Field> f;
    f["seed"] = number<std::uint64_t>(SACC_REF(seed));

    f["dataset.source"] = {[](const RunConfig& c) { return c.dataset_source; },
                           [](RunConfig& c, const std::string& k, const std::string& v) {
                             if (v != "glyph" && v != "folder") bad_value(k, v, "glyph|folder");
                             c.dataset_source = v;
                           }};
    f["dataset.path"] = {[](const RunConfig& c) { return c.dataset_path; },
                         [](RunConfig& c, const std::string&, const std::string& v) { c.dataset_path = v; }};
    f["dataset.seed"] = number<std::uint64_t>(SACC_REF(dataset.seed));
    f["dataset.canvas_side"] = number<int>(SACC_REF(dataset.canvas_side));
    f["dataset.glyph_side"] = number<int>(SACC_REF(dataset.glyph_side));
    f["dataset.num_classes"] = number<int>(SACC_REF(dataset.num_classes));
    f["dataset.train_per_class"] = number<int>(SACC_REF(dataset.train_per_class));
    f["dataset.val_per_class"] = number<int>(SACC_REF(dataset.val_per_class));
    f["dataset.test_per_class"] = number<int>(SACC_REF(dataset.test_per_class));
    f["dataset.clutter_density"] = number<double>(SACC_REF(dataset.clutter_density));
    f["dataset.distractor_fraction"] = number<double>(SACC_REF(dataset.distractor_fraction));
    f["dataset.placement"] = choice<Placement>(SACC_REF(dataset.placement),
                                               {{"uniform", Placement::Uniform}, {"center", Placement::CenterBiased}});

    f["model.input_side"] = number<int>(SACC_REF(model.backbone.input_side));
    f["model.patch"] = number<int>(SACC_REF(model.backbone.patch));
    f["model.channels"] = {[](const RunConfig& c) { return format_int_list(c.model.backbone.channels); },
                           [](RunConfig& c, const std::string& k, const std::string& v) {
                             c.model.backbone.channels = parse_int_list(k, v);
                           }};
    f["model.parts"] = number<int>(SACC_REF(model.mpsa.parts));
    f["model.importance_damping"] = number<double>(SACC_REF(model.mpsa.importance_damping));
    f["model.disable_position_bias"] = boolean(SACC_REF(model.mpsa.disable_position_bias));
    f["model.window_side"] = number<int>(SACC_REF(model.window_side));
    f["model.beta_temperature"] = number<double>(SACC_REF(model.beta_temperature));
    f["model.mask_sigma"] = number<double>(SACC_REF(model.mask_sigma));

    f["train.optimizer"] =
        choice<Optimizer>(SACC_REF(train.optimizer), {{"sgd", Optimizer::Sgd}, {"adam", Optimizer::Adam}});
    f["train.adam_beta2"] = number<double>(SACC_REF(train.adam_beta2));
    f["train.epochs"] = number<int>(SACC_REF(train.epochs));
    f["train.batch_size"] = number<int>(SACC_REF(train.batch_size));
    f["train.learning_rate"] = number<double>(SACC_REF(train.learning_rate));
    f["train.warmup_epochs"] = number<double>(SACC_REF(train.warmup_epochs));
    f["train.weight_decay"] = number<double>(SACC_REF(train.weight_decay));
    f["train.momentum"] = number<double>(SACC_REF(train.momentum));
    f["train.label_smoothing"] = number<double>(SACC_REF(train.loss.label_smoothing));
    f["train.n_train"] = number<int>(SACC_REF(train.n_train));
    f["train.n_test"] = number<int>(SACC_REF(train.n_test));
    f["train.policy"] = choice<FixationPolicy>(
        SACC_REF(train.sampler),
        {{"saccadic", FixationPolicy::Saccadic}, {"random", FixationPolicy::Random}, {"none", FixationPolicy::None}});
    f["train.uniform_beta"] = boolean(SACC_REF(train.uniform_beta));
    f["train.patience"] = number<int>(SACC_REF(train.patience));
    f["train.threads"] = number<int>(SACC_REF(train.threads));

    f["loss.lambda_per"] = number<double>(SACC_REF(train.loss.lambda_per));
    f["loss.lambda_fix"] = number<double>(SACC_REF(train.loss.lambda_fix));
    f["loss.confidence_penalty"] = number<double>(SACC_REF(train.loss.confidence_penalty));
    f["loss.penalty_sign"] = choice<PenaltySign>(
        SACC_REF(train.loss.penalty_sign), {{"negative", PenaltySign::Negative}, {"printed", PenaltySign::AsPrinted}});

    f["sampler.temperature"] = number<double>(SACC_REF(train.sampler_params.temperature));
    f["sampler.nms_sigma"] = number<double>(SACC_REF(train.sampler_params.nms_sigma));
    f["sampler.nms_strength"] = number<double>(SACC_REF(train.sampler_params.nms_strength));
    f["sampler.squared_kernel"] = boolean(SACC_REF(train.sampler_params.squared_kernel));
    f["sampler.sigma_reference_side"] = number<double>(SACC_REF(train.sampler_params.sigma_reference_side));
    f["sampler.logits"] = choice<SamplerLogits>(SACC_REF(train.sampler_params.logits),
                                                {{"log", SamplerLogits::Log}, {"linear", SamplerLogits::Linear}});
    return f;
  }();
  return fields;
}

#undef SACC_REF

const Field& field(const std::string& key) {
  const auto& r = registry();
  const auto it = r.find(key);
  if (it == r.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

}  // namespace

RunConfig::RunConfig() {
  dataset.canvas_side = 256;
  dataset.glyph_side = 16;
  dataset.num_classes = 10;
  dataset.train_per_class = 50;
  dataset.val_per_class = 10;
  dataset.test_per_class = 20;
  dataset.seed = 1;
  model.backbone.input_side = 64;
  model.backbone.patch = 4;
  model.backbone.channels = {32, 64};
  model.mpsa.parts = 8;
  model.window_side = 64;
  train.epochs = 30;
  train.batch_size = 16;
  train.optimizer = Optimizer::Adam;
  train.learning_rate = 0.003;
  train.warmup_epochs = 2;
  train.patience = 0;  // fixation accuracy takes off late; keep the full schedule
  train.weight_decay = 1e-3;
  train.loss.label_smoothing = 0.1;
}

void RunConfig::set(const std::string& key, const std::string& value) { field(key).set(*this, key, trim(value)); }

std::string RunConfig::get(const std::string& key) const { return field(key).get(*this); }

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& [name, f] : registry()) out.push_back(name);
    return out;
  }();
  return k;
}

std::string RunConfig::to_text() const {
  std::string s;
  for (const auto& k : keys()) s += k + " = " + get(k) + "\n";
  return s;
}

ModelConfig RunConfig::model_config() const {
  ModelConfig m = model;
  m.source_side = dataset.canvas_side;
  m.mpsa.num_classes = dataset.num_classes;
  m.seed = derive_seed(seed, {0x4d4f44u});
  return m;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t = train;
  t.loss.num_classes = dataset.num_classes;
  t.seed = derive_seed(seed, {0x545241u});
  t.sampler_params.seed = t.seed;
  return t;
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    cfg.set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

DatasetBundle load_datasets(const RunConfig& cfg) {
  DatasetBundle b;
  if (cfg.dataset_source == "folder") {
    if (cfg.dataset_path.empty()) throw ConfigError("dataset.source = folder needs dataset.path");
    const std::filesystem::path root(cfg.dataset_path);
    b.train = std::make_unique<ImageFolderDataset>(root / "train");
    b.test = std::make_unique<ImageFolderDataset>(root / "test");
    if (b.train->num_classes() != cfg.dataset.num_classes)
      throw ConfigError("folder dataset has " + std::to_string(b.train->num_classes()) +
                        " classes but dataset.num_classes = " + std::to_string(cfg.dataset.num_classes));
    return b;
  }
  GlyphSplits s = generate_glyph_dataset(cfg.dataset);
  b.train = std::make_unique<GlyphDataset>(std::move(s.train));
  b.val = std::make_unique<GlyphDataset>(std::move(s.val));
  b.test = std::make_unique<GlyphDataset>(std::move(s.test));
  return b;
}

}  // namespace sacc
