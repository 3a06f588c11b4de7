// Command-line front end. Talks to the library only through the C API.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "m3/m3.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Failure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void check(m3_status s) {
  if (s != M3_OK) throw Failure(m3_last_error());
}

std::string take(char* s) {
  std::string out = s ? s : "";
  m3_string_free(s);
  return out;
}

using Dataset = std::unique_ptr<m3_dataset, decltype(&m3_dataset_free)>;
using Model = std::unique_ptr<m3_model, decltype(&m3_model_free)>;

Dataset read_dataset(const std::string& path) {
  m3_dataset* d = nullptr;
  check(m3_dataset_read(path.c_str(), &d));
  return Dataset(d, m3_dataset_free);
}

Model load_model(const std::string& path) {
  m3_model* m = nullptr;
  check(m3_model_load(path.c_str(), &m));
  return Model(m, m3_model_free);
}

std::vector<std::size_t> parse_list(const std::string& text, const char* what) {
  // "5,10,20" or an inclusive range "1:100".
  std::vector<std::size_t> out;
  auto number = [&](const std::string& s) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(s, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (s.empty() || pos != s.size() || s[0] == '-') {
      throw Failure(std::string("bad ") + what + " value '" + s + "'");
    }
    return static_cast<std::size_t>(v);
  };
  if (const auto colon = text.find(':'); colon != std::string::npos) {
    const auto lo = number(text.substr(0, colon)), hi = number(text.substr(colon + 1));
    if (hi < lo) throw Failure(std::string("empty ") + what + " range '" + text + "'");
    for (std::size_t v = lo; v <= hi; ++v) out.push_back(v);
    return out;
  }
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) out.push_back(number(part));
  if (out.empty()) throw Failure(std::string("no ") + what + " given");
  return out;
}

std::vector<std::string> split_names(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) out.push_back(part);
  return out;
}

std::string flag_name(std::string key) {
  for (auto& c : key) {
    if (c == '_') c = '-';
  }
  return key;
}

std::string key_name(std::string flag) {
  for (auto& c : flag) {
    if (c == '-') c = '_';
  }
  return flag;
}

// A group of options generated from a resolved JSON config; values stay
// strings until they are turned back into JSON with the default's type.
class JsonOptions {
 public:
  JsonOptions(CLI::App* app, const std::string& defaults_json, const std::string& group,
              std::map<std::string, std::string> aliases = {}, std::vector<std::string> skip = {}) {
    defaults_ = json::parse(defaults_json);
    for (auto& [key, value] : defaults_.items()) {
      if (std::find(skip.begin(), skip.end(), key) != skip.end()) continue;
      std::string& slot = values_[key];
      slot = value.is_null() ? "" : value.is_string() ? value.get<std::string>() : value.dump();
      std::string names = "--" + flag_name(key);
      if (auto a = aliases.find(key); a != aliases.end()) names += "," + a->second;
      app->add_option(names, slot)->group(group)->default_str(slot);
    }
  }

  json to_json() const {
    json out = json::object();
    for (const auto& [key, text] : values_) {
      const auto& d = defaults_.at(key);
      try {
        if (d.is_string()) {
          out[key] = text;
        } else if (text.empty()) {
          out[key] = nullptr;
        } else if (d.is_boolean()) {
          if (text != "true" && text != "false" && text != "1" && text != "0") throw Failure("");
          out[key] = text == "true" || text == "1";
        } else {
          out[key] = json::parse(text);
          if (!out[key].is_number()) throw Failure("");
        }
      } catch (const std::exception&) {
        throw Failure("--" + flag_name(key) + ": bad value '" + text + "'");
      }
    }
    return out;
  }

 private:
  json defaults_;
  std::map<std::string, std::string> values_;
};

std::string resolved(m3_status (*resolve)(const char*, char**), const char* input = nullptr) {
  char* out = nullptr;
  check(resolve(input, &out));
  return take(out);
}

struct Context {
  std::string out_dir;
  std::uint64_t seed = 1;
  std::string config_file;
  CLI::App* command = nullptr;

  fs::path out(const std::string& name) const { return fs::path(out_dir) / name; }
};

std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

// Timestamps never enter the main outputs; they go to a per-command log.
class SideLog {
 public:
  explicit SideLog(const fs::path& path) : out_(path, std::ios::app) {}
  void line(const std::string& text) {
    if (out_) out_ << timestamp() << ' ' << text << '\n' << std::flush;
  }

 private:
  std::ofstream out_;
};

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + '"';
}

// Flat `key = "value"` file with every option of the command, loadable again
// through --config.
void write_resolved_config(const Context& ctx, const json& sections) {
  std::ofstream out(ctx.out(ctx.command->get_name() + ".config.toml"));
  if (!out) throw Failure("cannot write resolved config into " + ctx.out_dir);
  out << "# resolved options for '" << ctx.command->get_name() << "'\n";
  std::map<std::string, std::string> lines;
  for (const CLI::Option* opt : ctx.command->get_options()) {
    const std::string& name = opt->get_single_name();
    if (name.empty() || name == "help" || name == "config" || opt->get_lnames().empty()) continue;
    std::string value;
    if (opt->count() > 0) {
      for (const auto& r : opt->reduced_results()) value += (value.empty() ? "" : ",") + r;
    } else {
      value = opt->get_default_str();
    }
    lines[opt->get_lnames().front()] = value;
  }
  for (const auto& [key, value] : lines) {
    out << key_name(key) << " = " << quote(value) << '\n';
  }
  std::ofstream js(ctx.out(ctx.command->get_name() + ".config.json"));
  js << sections.dump(2) << '\n';
}

// Expands `--config FILE` into `--key=value` arguments placed before the
// explicit ones, so flags win over the file and the file over defaults.
std::vector<std::string> expand_config(std::vector<std::string> args, CLI::App& app,
                                       std::string& config_file) {
  std::size_t at = args.size();
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      at = i;
      config_file = args[i + 1];
      break;
    }
    if (args[i].rfind("--config=", 0) == 0) {
      at = i;
      config_file = args[i].substr(9);
      break;
    }
  }
  if (at == args.size()) return args;
  const bool inline_form = args[at] != "--config";
  args.erase(args.begin() + static_cast<std::ptrdiff_t>(at),
             args.begin() + static_cast<std::ptrdiff_t>(at + (inline_form ? 1 : 2)));

  std::ifstream in(config_file);
  if (!in) throw Failure("cannot open config file " + config_file);
  const auto items = CLI::ConfigTOML().from_config(in);

  std::size_t sub_pos = 0;
  CLI::App* sub = nullptr;
  for (std::size_t i = 1; i < args.size() && !sub; ++i) {
    for (CLI::App* s : app.get_subcommands({})) {
      if (s->get_name() == args[i]) {
        sub = s;
        sub_pos = i;
      }
    }
  }
  if (!sub) throw Failure("--config must follow a command");

  std::vector<std::string> injected;
  for (const auto& item : items) {
    if (!item.parents.empty()) {
      throw Failure(config_file + ": sections are not supported (found '" + item.parents.front() +
                    "')");
    }
    if (item.name == "++") continue;
    const std::string flag = "--" + flag_name(item.name);
    if (flag == "--config" || !sub->get_option_no_throw(flag)) {
      throw Failure(config_file + ": unknown key '" + item.name + "' for command '" +
                    sub->get_name() + "'");
    }
    std::string value;
    for (const auto& v : item.inputs) value += (value.empty() ? "" : ",") + v;
    // Empty means "not set", as written by the resolved config.
    if (!value.empty()) injected.push_back(flag + "=" + value);
  }
  args.insert(args.begin() + static_cast<std::ptrdiff_t>(sub_pos + 1), injected.begin(),
              injected.end());
  return args;
}

void print_record(void*, const char* label, size_t epoch, size_t step, double loss,
                  double val_map20) {
  std::printf("[%s] epoch %zu step %zu loss %.6f", label, epoch, step, loss);
  if (!std::isnan(val_map20)) std::printf(" val_map20 %.6f", val_map20);
  std::printf("\n");
  std::fflush(stdout);
}

struct DataPaths {
  std::string dir;
  std::string train, validation, test;

  void add(CLI::App* app, bool need_train, bool need_test) {
    app->add_option("--data", dir, "directory holding train.tsv, validation.tsv, test.tsv");
    if (need_train) {
      app->add_option("--train", train, "training windows (default <data>/train.tsv)");
      app->add_option("--validation", validation,
                      "validation windows (default <data>/validation.tsv when present)");
    }
    if (need_test) app->add_option("--test", test, "test windows (default <data>/test.tsv)");
  }

  std::string resolve(const std::string& given, const std::string& name, bool required) const {
    if (!given.empty()) return given;
    if (!dir.empty()) {
      const auto p = (fs::path(dir) / name).string();
      if (required || fs::exists(p)) return p;
    }
    if (required) throw Failure("no " + name + " given (use --data or --" + name.substr(0, name.find('.')) + ")");
    return "";
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("Mixture-of-sequential-models recommender toolkit");
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  Context ctx;
  const char* env_out = std::getenv("M3_OUT_DIR");
  ctx.out_dir = env_out && *env_out ? env_out : ".";

  std::string model_defaults, train_defaults, dataset_defaults, synth_defaults;
  try {
    model_defaults = resolved(m3_model_config_resolve);
    train_defaults = resolved(m3_train_config_resolve);
    dataset_defaults = resolved(m3_dataset_config_resolve);
    synth_defaults = resolved(m3_synthetic_config_resolve);
  } catch (const Failure& e) {
    std::fprintf(stderr, "m3: error: %s\n", e.what());
    return 1;
  }

  auto common = [&](CLI::App* sub) {
    sub->add_option("--out-dir", ctx.out_dir, "output directory (default $M3_OUT_DIR or .)")
        ->default_str(ctx.out_dir);
    sub->add_option("--seed", ctx.seed, "root seed")->default_str("1");
    sub->add_option("--config", ctx.config_file, "flat key = value file of option defaults");
  };
  const std::map<std::string, std::string> model_alias{{"aggregation", "--agg"}};
  const std::map<std::string, std::string> train_alias{{"learning_rate", "--lr"},
                                                       {"min_target_position", "--min-target"}};

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic sequence dataset");
  common(synth);
  std::string synth_kind = "markov", synth_output = "sequences.tsv";
  synth->add_option("--kind", synth_kind, "markov | long-copy | mixed-context")->default_str(synth_kind);
  synth->add_option("--output", synth_output, "file name inside the output directory")
      ->default_str(synth_output);
  JsonOptions synth_opts(synth, synth_defaults, "Generator");

  // prepare
  auto* prepare = app.add_subcommand("prepare", "filter, window and split sequences");
  common(prepare);
  std::string prep_input, prep_sequences, prep_variant;
  prepare->add_option("--input", prep_input, "MovieLens ratings.csv");
  prepare->add_option("--sequences", prep_sequences, "sequence file (e.g. from synth)");
  prepare->add_option("--variant,--preset", prep_variant, "ml20m | ml20m-s | ml20m-m | ml20m-l | ml20m-xl");
  JsonOptions prep_opts(prepare, dataset_defaults, "Dataset",
                        {{"min_length", "--min-len"}, {"max_length", "--max-len"}});

  // train
  auto* train = app.add_subcommand("train", "train a model");
  common(train);
  DataPaths train_data;
  train_data.add(train, true, false);
  JsonOptions train_model(train, model_defaults, "Model", model_alias);
  JsonOptions train_opts(train, train_defaults, "Training", train_alias, {"seed"});

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a trained model");
  common(eval);
  DataPaths eval_data;
  eval_data.add(eval, false, true);
  std::string eval_model = "model.m3ck", eval_ns = "5,10,20", eval_output = "metrics.csv";
  std::size_t eval_threads = 1;
  eval->add_option("--model", eval_model, "checkpoint (relative paths resolve in the output directory)")
      ->default_str(eval_model);
  eval->add_option("--n", eval_ns, "cutoffs")->default_str(eval_ns);
  eval->add_option("--threads", eval_threads, "scoring workers")->default_str("1");
  eval->add_option("--output", eval_output)->default_str(eval_output);

  // ablate
  auto* ablate = app.add_subcommand("ablate", "train and evaluate one model per encoder subset");
  common(ablate);
  DataPaths ablate_data;
  ablate_data.add(ablate, true, true);
  std::string subsets = "T,S,L,TS,TL,SL,TSL", ablate_ns = "5,10,20", ablate_output = "ablation.csv";
  ablate->add_option("--subsets", subsets)->default_str(subsets);
  ablate->add_option("--n", ablate_ns, "cutoffs")->default_str(ablate_ns);
  ablate->add_option("--output", ablate_output)->default_str(ablate_output);
  JsonOptions ablate_model(ablate, model_defaults, "Model", model_alias, {"encoders"});
  JsonOptions ablate_opts(ablate, train_defaults, "Training", train_alias, {"seed"});

  // lrd
  auto* lrd = app.add_subcommand("lrd", "long-range dependence profile of item sequences");
  common(lrd);
  std::string lrd_sequences, lrd_model, lrd_embeddings, lrd_lags = "1:100",
                                                       lrd_output = "lrd_profile.csv";
  std::size_t lrd_threads = 1;
  lrd->add_option("--sequences", lrd_sequences, "sequence file")->required();
  auto* lrd_m = lrd->add_option("--model", lrd_model, "take embeddings from this checkpoint");
  auto* lrd_e = lrd->add_option("--embeddings", lrd_embeddings, "`item_index v1 .. vd` file");
  lrd_m->excludes(lrd_e);
  lrd->add_option("--lags", lrd_lags, "list or inclusive range lo:hi")->default_str(lrd_lags);
  lrd->add_option("--threads", lrd_threads)->default_str("1");
  lrd->add_option("--output", lrd_output)->default_str(lrd_output);

  // gates
  auto* gates = app.add_subcommand("gates", "mean gate values grouped by context");
  common(gates);
  std::string gates_model = "model.m3ck", gates_data, gates_group = "context", gates_labels,
              gates_output = "gates.csv";
  gates->add_option("--model", gates_model)->default_str(gates_model);
  gates->add_option("--sequences", gates_data, "windows to report on")->required();
  gates->add_option("--group-by", gates_group, "context | ctx_in:<f> | ctx_out:<f>")
      ->default_str(gates_group);
  gates->add_option("--labels", gates_labels, "comma-separated names for groups 0, 1, ...");
  gates->add_option("--output", gates_output)->default_str(gates_output);

  std::vector<std::string> args(argv, argv + argc);
  try {
    args = expand_config(args, app, ctx.config_file);
  } catch (const Failure& e) {
    std::fprintf(stderr, "m3: error: %s\n", e.what());
    return 2;
  }
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend() - 1);
    app.parse(std::move(reversed));
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  for (CLI::App* s : app.get_subcommands()) ctx.command = s;
  const std::string name = ctx.command->get_name();
  auto in_out = [&](const std::string& p) {
    return fs::path(p).is_absolute() || fs::exists(p) ? p : ctx.out(p).string();
  };

  std::unique_ptr<SideLog> log;
  try {
    fs::create_directories(ctx.out_dir);
    log = std::make_unique<SideLog>(ctx.out(name + ".log"));
    std::string cmdline;
    for (std::size_t i = 1; i < args.size(); ++i) cmdline += (i > 1 ? " " : "") + args[i];
    log->line("start " + cmdline);
    json sections;
    sections["command"] = name;
    sections["seed"] = ctx.seed;

    if (synth == ctx.command) {
      const auto params = synth_opts.to_json();
      sections["synthetic"] = json::parse(resolved(m3_synthetic_config_resolve, params.dump().c_str()));
      sections["kind"] = synth_kind;
      m3_dataset* d = nullptr;
      check(m3_synthetic_generate(synth_kind.c_str(), params.dump().c_str(), ctx.seed, &d));
      Dataset data(d, m3_dataset_free);
      write_resolved_config(ctx, sections);
      check(m3_dataset_write(data.get(), ctx.out(synth_output).c_str()));
      std::printf("wrote %zu sequences to %s\n", m3_dataset_size(data.get()),
                  ctx.out(synth_output).c_str());
    } else if (prepare == ctx.command) {
      if (prep_input.empty() == prep_sequences.empty()) {
        throw Failure("prepare needs exactly one of --input or --sequences");
      }
      json cfg = prep_opts.to_json();
      if (!prep_variant.empty()) {
        // The preset supplies the length and window fields; explicit flags
        // still override them.
        char* p = nullptr;
        check(m3_dataset_config_json(prep_variant.c_str(), &p));
        const auto preset = json::parse(take(p));
        for (auto& [key, value] : preset.items()) {
          if (!prepare->get_option("--" + flag_name(key))->count()) cfg[key] = value;
        }
      }
      sections["dataset"] = json::parse(resolved(m3_dataset_config_resolve, cfg.dump().c_str()));
      m3_dataset* raw = nullptr;
      if (!prep_input.empty()) {
        check(m3_movielens_load(prep_input.c_str(), cfg.at("min_item_count").get<std::size_t>(),
                                ctx.out("vocabulary.tsv").c_str(), &raw));
      } else {
        check(m3_dataset_read(prep_sequences.c_str(), &raw));
      }
      Dataset full(raw, m3_dataset_free);
      m3_dataset *tr = nullptr, *va = nullptr, *te = nullptr;
      check(m3_dataset_prepare(full.get(), cfg.dump().c_str(), ctx.seed, &tr, &va, &te));
      Dataset a(tr, m3_dataset_free), b(va, m3_dataset_free), c(te, m3_dataset_free);
      write_resolved_config(ctx, sections);
      check(m3_dataset_write(a.get(), ctx.out("train.tsv").c_str()));
      check(m3_dataset_write(b.get(), ctx.out("validation.tsv").c_str()));
      check(m3_dataset_write(c.get(), ctx.out("test.tsv").c_str()));
      std::printf("windows: train %zu, validation %zu, test %zu\n", m3_dataset_size(a.get()),
                  m3_dataset_size(b.get()), m3_dataset_size(c.get()));
    } else if (train == ctx.command) {
      const auto tr_path = train_data.resolve(train_data.train, "train.tsv", true);
      const auto va_path = train_data.resolve(train_data.validation, "validation.tsv", false);
      auto tr = read_dataset(tr_path);
      Dataset va(nullptr, m3_dataset_free);
      if (!va_path.empty()) va = read_dataset(va_path);
      json tc = train_opts.to_json();
      tc["seed"] = ctx.seed;
      const auto mc = train_model.to_json();
      sections["model"] = json::parse(resolved(m3_model_config_resolve, mc.dump().c_str()));
      sections["train"] = json::parse(resolved(m3_train_config_resolve, tc.dump().c_str()));
      sections["train_file"] = tr_path;
      sections["validation_file"] = va_path;
      m3_model* m = nullptr;
      check(m3_model_create(mc.dump().c_str(), tr.get(), ctx.seed, &m));
      Model model(m, m3_model_free);
      write_resolved_config(ctx, sections);
      check(m3_model_train(model.get(), tr.get(), va.get(), tc.dump().c_str(),
                           ctx.out("loss.csv").c_str(), print_record, nullptr));
      check(m3_model_save(model.get(), ctx.out("model.m3ck").c_str()));
      std::printf("saved %s\n", ctx.out("model.m3ck").c_str());
    } else if (eval == ctx.command) {
      const auto te_path = eval_data.resolve(eval_data.test, "test.tsv", true);
      auto model = load_model(in_out(eval_model));
      auto te = read_dataset(te_path);
      const auto ns = parse_list(eval_ns, "--n");
      std::vector<double> map(ns.size());
      std::size_t n_examples = 0;
      sections["model_file"] = in_out(eval_model);
      sections["test_file"] = te_path;
      sections["n"] = ns;
      write_resolved_config(ctx, sections);
      check(m3_evaluate(model.get(), te.get(), ns.data(), ns.size(), eval_threads, map.data(),
                        &n_examples));
      char* cfg = nullptr;
      check(m3_model_config(model.get(), &cfg));
      const auto mc = json::parse(take(cfg));
      const auto variant = mc.at("variant").get<std::string>();
      const auto subset = mc.at("encoders").get<std::string>();
      const auto gate = mc.at("gate").get<std::string>();
      const m3_metrics_row row{variant.c_str(), subset.c_str(), gate.c_str(), ns.data(),
                               map.data(),      ns.size(),      n_examples};
      check(m3_metrics_csv_write(ctx.out(eval_output).c_str(), &row, 1));
      for (std::size_t i = 0; i < ns.size(); ++i) std::printf("map@%zu %.6f\n", ns[i], map[i]);
    } else if (ablate == ctx.command) {
      auto tr = read_dataset(ablate_data.resolve(ablate_data.train, "train.tsv", true));
      const auto va_path = ablate_data.resolve(ablate_data.validation, "validation.tsv", false);
      Dataset va(nullptr, m3_dataset_free);
      if (!va_path.empty()) va = read_dataset(va_path);
      auto te = read_dataset(ablate_data.resolve(ablate_data.test, "test.tsv", true));
      const auto ns = parse_list(ablate_ns, "--n");
      json tc = ablate_opts.to_json();
      tc["seed"] = ctx.seed;
      const auto mc = ablate_model.to_json();
      sections["model"] = json::parse(resolved(m3_model_config_resolve, mc.dump().c_str()));
      sections["train"] = json::parse(resolved(m3_train_config_resolve, tc.dump().c_str()));
      sections["subsets"] = subsets;
      sections["n"] = ns;
      write_resolved_config(ctx, sections);
      check(m3_ablate(tr.get(), va.get(), te.get(), mc.dump().c_str(), tc.dump().c_str(),
                      subsets.c_str(), ns.data(), ns.size(), ctx.out(ablate_output).c_str(),
                      nullptr, print_record, nullptr));
      std::printf("wrote %s\n", ctx.out(ablate_output).c_str());
    } else if (lrd == ctx.command) {
      auto seqs = read_dataset(lrd_sequences);
      std::string emb = lrd_embeddings;
      if (!lrd_model.empty()) {
        auto model = load_model(in_out(lrd_model));
        emb = ctx.out("embeddings.txt").string();
        check(m3_model_write_embeddings(model.get(), emb.c_str()));
      }
      if (emb.empty()) throw Failure("lrd needs --model or --embeddings");
      const auto lags = parse_list(lrd_lags, "--lags");
      sections["sequences_file"] = lrd_sequences;
      sections["embeddings_file"] = emb;
      sections["lags"] = lags;
      write_resolved_config(ctx, sections);
      double slope = 0;
      check(m3_lrd_profile(seqs.get(), emb.c_str(), lags.data(), lags.size(), lrd_threads,
                           ctx.out(lrd_output).c_str(), nullptr, &slope));
      if (std::isnan(slope)) {
        std::printf("log-log slope: undefined\n");
      } else {
        std::printf("log-log slope: %.6f\n", slope);
      }
    } else if (gates == ctx.command) {
      auto model = load_model(in_out(gates_model));
      auto data = read_dataset(gates_data);
      const auto names = gates_labels.empty() ? std::vector<std::string>{} : split_names(gates_labels);
      std::vector<const char*> labels;
      for (const auto& n : names) labels.push_back(n.c_str());
      sections["model_file"] = in_out(gates_model);
      sections["sequences_file"] = gates_data;
      write_resolved_config(ctx, sections);
      check(m3_gate_report(model.get(), data.get(), gates_group.c_str(), labels.data(),
                           labels.size(), ctx.out(gates_output).c_str()));
      std::printf("wrote %s\n", ctx.out(gates_output).c_str());
    }
    log->line("done");
  } catch (const std::exception& e) {
    if (log) log->line(std::string("failed: ") + e.what());
    std::fprintf(stderr, "m3 %s: error: %s\n", name.c_str(), e.what());
    return 1;
  }
  return 0;
}
