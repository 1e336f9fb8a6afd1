#include "condense/config.hpp"

#include <cstdlib>
#include <set>

#include "condense/errors.hpp"
#include "condense/io.hpp"

namespace condense {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

void RunConfig::validate() const {
  try {
    model.validate();
    train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (traces.n_sequences < 1) throw ConfigError("traces.n_sequences must be >= 1");
  if (traces.seq_len < 2) throw ConfigError("traces.seq_len must be >= 2");
  if (traces.seq_len > model.context_len) throw ConfigError("traces.seq_len exceeds model.context_len");
  if (bins < 2) throw ConfigError("bins must be >= 2");
}

std::filesystem::path resolve_output_dir(const std::string& output_dir) {
  std::filesystem::path p(output_dir);
  if (const char* root = std::getenv(kOutputRootEnv); root != nullptr && *root != '\0' && p.is_relative()) {
    return std::filesystem::path(root) / p;
  }
  return p;
}

ojson to_json(const ModelConfig& c) {
  return ojson{{"n_layers", c.n_layers},     {"d_model", c.d_model},
               {"n_heads", c.n_heads},       {"d_ff", c.d_ff},
               {"vocab_size", c.vocab_size}, {"context_len", c.context_len},
               {"norm_eps", c.norm_eps}};
}

ojson to_json(const TrainConfig& c) {
  return ojson{{"seed", c.seed},
               {"steps", c.steps},
               {"batch_size", c.batch_size},
               {"lr", c.lr},
               {"schedule", std::string(to_string(c.schedule))},
               {"warmup_steps", c.warmup_steps},
               {"min_lr_ratio", c.min_lr_ratio},
               {"beta1", c.beta1},
               {"beta2", c.beta2},
               {"adam_eps", c.adam_eps},
               {"weight_decay", c.weight_decay},
               {"grad_clip", c.grad_clip}};
}

ojson to_json(const LossConfig& c) {
  return ojson{{"kind", std::string(to_string(c.kind))},
               {"tau", c.tau},
               {"lambda_disp", c.lambda_disp},
               {"lambda_norm", c.lambda_norm},
               {"clamp_eps", c.clamp_eps},
               {"layer_aggregation", std::string(to_string(c.layer_aggregation))},
               {"covariance_divisor", std::string(to_string(c.covariance_divisor))}};
}

ojson to_json(const TraceSampling& c) {
  return ojson{{"n_sequences", c.n_sequences}, {"seq_len", c.seq_len}, {"snapshot_every", c.snapshot_every}};
}

ojson to_json(const RunConfig& c) {
  return ojson{{"model", to_json(c.model)},
               {"train", to_json(c.train)},
               {"loss", to_json(c.train.loss)},
               {"traces", to_json(c.traces)},
               {"corpus", c.corpus},
               {"output_dir", c.output_dir},
               {"init_checkpoint", c.init_checkpoint},
               {"bins", c.bins}};
}

namespace {

// Reads known keys from an object, rejecting anything unexpected.
class Reader {
 public:
  Reader(const json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j_.is_object()) throw ConfigError(where("") + " must be an object");
  }

  void size(const char* key, std::size_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<long long>() >= 0)) {
        throw ConfigError(where(key) + " must be a non-negative integer");
      }
      out = v->get<std::size_t>();
    }
  }
  void u64(const char* key, std::uint64_t& out) {
    std::size_t tmp = out;
    size(key, tmp);
    out = tmp;
  }
  void number(const char* key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) throw ConfigError(where(key) + " must be a number");
      out = v->get<double>();
    }
  }
  void text(const char* key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw ConfigError(where(key) + " must be a string");
      out = v->get<std::string>();
    }
  }
  template <typename E, typename Parse>
  void choice(const char* key, E& out, Parse parse) {
    std::string s;
    if (find(key) == nullptr) return;
    text(key, s);
    try {
      out = parse(s);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }
  const json* object(const char* key) { return find(key); }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.contains(it.key())) throw ConfigError("unknown configuration key " + where(it.key()));
    }
  }

 private:
  const json* find(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  std::string where(const std::string& key) const {
    if (section_.empty()) return "'" + key + "'";
    return "'" + section_ + (key.empty() ? "" : "." + key) + "'";
  }

  const json& j_;
  std::string section_;
  std::set<std::string> seen_;
};

}  // namespace

ModelConfig model_from_json(const json& j, ModelConfig c) {
  Reader r(j, "model");
  r.size("n_layers", c.n_layers);
  r.size("d_model", c.d_model);
  r.size("n_heads", c.n_heads);
  r.size("d_ff", c.d_ff);
  r.size("vocab_size", c.vocab_size);
  r.size("context_len", c.context_len);
  r.number("norm_eps", c.norm_eps);
  r.finish();
  return c;
}

TrainConfig train_from_json(const json& j, TrainConfig c) {
  Reader r(j, "train");
  r.u64("seed", c.seed);
  r.size("steps", c.steps);
  r.size("batch_size", c.batch_size);
  r.number("lr", c.lr);
  r.choice("schedule", c.schedule, parse_schedule);
  r.size("warmup_steps", c.warmup_steps);
  r.number("min_lr_ratio", c.min_lr_ratio);
  r.number("beta1", c.beta1);
  r.number("beta2", c.beta2);
  r.number("adam_eps", c.adam_eps);
  r.number("weight_decay", c.weight_decay);
  r.number("grad_clip", c.grad_clip);
  r.finish();
  return c;
}

LossConfig loss_from_json(const json& j, LossConfig c) {
  Reader r(j, "loss");
  r.choice("kind", c.kind, parse_loss_kind);
  r.number("tau", c.tau);
  r.number("lambda_disp", c.lambda_disp);
  r.number("lambda_norm", c.lambda_norm);
  r.number("clamp_eps", c.clamp_eps);
  r.choice("layer_aggregation", c.layer_aggregation, parse_aggregation);
  r.choice("covariance_divisor", c.covariance_divisor, parse_divisor);
  r.finish();
  return c;
}

TraceSampling traces_from_json(const json& j, TraceSampling c) {
  Reader r(j, "traces");
  r.size("n_sequences", c.n_sequences);
  r.size("seq_len", c.seq_len);
  r.size("snapshot_every", c.snapshot_every);
  r.finish();
  return c;
}

RunConfig run_config_from_json(const json& j, RunConfig c) {
  Reader r(j, "");
  if (const json* m = r.object("model")) c.model = model_from_json(*m, c.model);
  if (const json* t = r.object("train")) {
    LossConfig keep = c.train.loss;
    c.train = train_from_json(*t, c.train);
    c.train.loss = keep;
  }
  if (const json* l = r.object("loss")) c.train.loss = loss_from_json(*l, c.train.loss);
  if (const json* t = r.object("traces")) c.traces = traces_from_json(*t, c.traces);
  r.text("corpus", c.corpus);
  r.text("output_dir", c.output_dir);
  r.text("init_checkpoint", c.init_checkpoint);
  r.size("bins", c.bins);
  r.finish();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  RunConfig c = run_config_from_json(j);
  c.validate();
  return c;
}

}  // namespace condense
