#include "m3/m3.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <new>
#include <string>
#include <utility>
#include <variant>

#include "json.hpp"
#include "m3/ablation.hpp"
#include "m3/checkpoint.hpp"
#include "m3/error.hpp"
#include "m3/evaluation.hpp"
#include "m3/lrd.hpp"
#include "m3/sequence_data.hpp"
#include "m3/synthetic.hpp"
#include "m3/training.hpp"

struct m3_dataset {
  m3::SequenceSet set;
};

struct m3_model {
  std::variant<std::unique_ptr<m3::M3Model<double>>, std::unique_ptr<m3::M3Model<float>>> impl;

  template <class F>
  decltype(auto) visit(F&& f) {
    return std::visit([&](auto& p) -> decltype(auto) { return f(*p); }, impl);
  }
  template <class F>
  decltype(auto) visit(F&& f) const {
    return std::visit([&](const auto& p) -> decltype(auto) { return f(std::as_const(*p)); }, impl);
  }
};

namespace {

thread_local std::string g_last_error;

m3_status set_error(m3_status code, const std::string& message) {
  g_last_error = message;
  return code;
}

template <class F>
m3_status guarded(F&& f) {
  try {
    f();
    return M3_OK;
  } catch (const m3::Error& e) {
    return set_error(static_cast<m3_status>(e.code()), e.what());
  } catch (const nlohmann::json::exception& e) {
    return set_error(M3_ERR_FORMAT, e.what());
  } catch (const std::bad_alloc&) {
    return set_error(M3_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return set_error(M3_ERR_INTERNAL, e.what());
  } catch (...) {
    return set_error(M3_ERR_INTERNAL, "unknown error");
  }
}

void need(const void* p, const char* what) {
  if (!p) m3::fail(m3::ErrorCode::invalid_argument, std::string(what) + " must not be null");
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

std::string json_or_empty(const char* text) { return text && *text ? text : "{}"; }

m3_model* wrap(const m3::M3Config& config, const m3::DatasetMeta& meta, std::uint64_t seed) {
  auto* m = new m3_model;
  if (config.precision == m3::Precision::float32) {
    m->impl = std::make_unique<m3::M3Model<float>>(config, meta, seed);
  } else {
    m->impl = std::make_unique<m3::M3Model<double>>(config, meta, seed);
  }
  return m;
}

std::function<void(const m3::LossRecord&)> forward_records(m3_record_fn fn, void* user,
                                                           std::string label) {
  if (!fn) return {};
  return [fn, user, label = std::move(label)](const m3::LossRecord& r) {
    fn(user, label.c_str(), r.epoch, r.step, r.loss,
       r.val_map20.value_or(std::numeric_limits<double>::quiet_NaN()));
  };
}

}  // namespace

extern "C" {

const char* m3_version(void) { return "0.1.0"; }

const char* m3_last_error(void) { return g_last_error.c_str(); }

const char* m3_status_name(m3_status status) {
  switch (status) {
    case M3_OK: return "ok";
    case M3_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case M3_ERR_SHAPE_MISMATCH: return "shape_mismatch";
    case M3_ERR_NON_FINITE: return "non_finite";
    case M3_ERR_IO: return "io";
    case M3_ERR_FORMAT: return "format";
    case M3_ERR_VOCABULARY_MISMATCH: return "vocabulary_mismatch";
    case M3_ERR_DIVERGED: return "diverged";
    case M3_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

void m3_string_free(char* s) { std::free(s); }

m3_status m3_dataset_read(const char* path, m3_dataset** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = nullptr;
    auto d = std::make_unique<m3_dataset>();
    d->set = m3::read_sequences(std::string(path));
    *out = d.release();
  });
}

m3_status m3_dataset_write(const m3_dataset* dataset, const char* path) {
  return guarded([&] {
    need(dataset, "dataset");
    need(path, "path");
    m3::write_sequences(std::string(path), dataset->set);
  });
}

void m3_dataset_free(m3_dataset* dataset) { delete dataset; }

size_t m3_dataset_size(const m3_dataset* dataset) {
  return dataset ? dataset->set.sequences.size() : 0;
}

m3_status m3_dataset_meta_json(const m3_dataset* dataset, char** out) {
  return guarded([&] {
    need(dataset, "dataset");
    need(out, "out");
    *out = dup_string(m3::meta_to_json(dataset->set.meta));
  });
}

m3_status m3_synthetic_generate(const char* kind, const char* params_json, uint64_t seed,
                                m3_dataset** out) {
  return guarded([&] {
    need(kind, "kind");
    need(out, "out");
    *out = nullptr;
    const auto params = m3::synthetic_params_from_json(json_or_empty(params_json));
    auto d = std::make_unique<m3_dataset>();
    d->set = m3::generate_synthetic(m3::parse_synthetic_kind(kind), params, seed).data;
    *out = d.release();
  });
}

m3_status m3_synthetic_config_resolve(const char* params_json, char** out) {
  return guarded([&] {
    need(out, "out");
    *out = dup_string(m3::synthetic_params_to_json(
        m3::synthetic_params_from_json(json_or_empty(params_json))));
  });
}

m3_status m3_movielens_load(const char* ratings_path, size_t min_item_count,
                            const char* vocabulary_path, m3_dataset** out) {
  return guarded([&] {
    need(ratings_path, "ratings_path");
    need(out, "out");
    *out = nullptr;
    auto filtered = m3::filter_items(m3::load_movielens(ratings_path), min_item_count);
    if (vocabulary_path) m3::write_vocabulary(vocabulary_path, filtered.vocabulary);
    auto d = std::make_unique<m3_dataset>();
    d->set.meta.n_items = filtered.vocabulary.size();
    d->set.sequences = std::move(filtered.sequences);
    *out = d.release();
  });
}

m3_status m3_dataset_config_json(const char* preset, char** out) {
  return guarded([&] {
    need(out, "out");
    const auto c = preset && *preset ? m3::dataset_preset(preset) : m3::DatasetConfig{};
    *out = dup_string(m3::dataset_config_to_json(c));
  });
}

m3_status m3_dataset_config_resolve(const char* config_json, char** out) {
  return guarded([&] {
    need(out, "out");
    const auto c = m3::dataset_config_from_json(json_or_empty(config_json));
    c.validate();
    *out = dup_string(m3::dataset_config_to_json(c));
  });
}

m3_status m3_dataset_prepare(const m3_dataset* sequences, const char* dataset_config_json,
                             uint64_t seed, m3_dataset** train, m3_dataset** validation,
                             m3_dataset** test) {
  return guarded([&] {
    need(sequences, "sequences");
    need(train, "train");
    need(validation, "validation");
    need(test, "test");
    *train = *validation = *test = nullptr;
    const auto config = m3::dataset_config_from_json(json_or_empty(dataset_config_json));
    const auto windows = m3::generate_windows(sequences->set.sequences, config);
    auto split = m3::split_users(windows, config.split, seed);
    auto make = [&](std::vector<m3::UserSequence>& part) {
      auto d = std::make_unique<m3_dataset>();
      d->set.meta = sequences->set.meta;
      d->set.sequences = std::move(part);
      return d;
    };
    auto a = make(split.train), b = make(split.validation), c = make(split.test);
    *train = a.release();
    *validation = b.release();
    *test = c.release();
  });
}

m3_status m3_model_config_resolve(const char* config_json, char** out) {
  return guarded([&] {
    need(out, "out");
    *out = dup_string(m3::config_to_json(m3::config_from_json(json_or_empty(config_json))));
  });
}

m3_status m3_train_config_resolve(const char* config_json, char** out) {
  return guarded([&] {
    need(out, "out");
    const auto c = m3::train_config_from_json(json_or_empty(config_json));
    c.validate();
    *out = dup_string(m3::train_config_to_json(c));
  });
}

m3_status m3_model_create(const char* config_json, const m3_dataset* dataset, uint64_t seed,
                          m3_model** out) {
  return guarded([&] {
    need(dataset, "dataset");
    need(out, "out");
    *out = nullptr;
    const auto config = m3::config_from_json(json_or_empty(config_json));
    config.validate(dataset->set.meta);
    *out = wrap(config, dataset->set.meta, seed);
  });
}

m3_status m3_model_load(const char* path, m3_model** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = nullptr;
    const auto ck = m3::read_checkpoint(std::string(path));
    std::unique_ptr<m3_model> m(wrap(ck.config, ck.meta, 0));
    m->visit([&](auto& model) { m3::restore(model, ck); });
    *out = m.release();
  });
}

m3_status m3_model_save(const m3_model* model, const char* path) {
  return guarded([&] {
    need(model, "model");
    need(path, "path");
    model->visit([&](const auto& m) { m3::write_checkpoint(std::string(path), m3::snapshot(m)); });
  });
}

void m3_model_free(m3_model* model) { delete model; }

m3_status m3_model_config(const m3_model* model, char** out) {
  return guarded([&] {
    need(model, "model");
    need(out, "out");
    *out = dup_string(model->visit([](const auto& m) { return m3::config_to_json(m.config()); }));
  });
}

size_t m3_model_items(const m3_model* model) {
  return model ? model->visit([](const auto& m) { return m.meta().n_items; }) : 0;
}

m3_status m3_model_write_embeddings(const m3_model* model, const char* path) {
  return guarded([&] {
    need(model, "model");
    need(path, "path");
    const auto table = model->visit([](const auto& m) {
      const auto* p = m.parameters().find("item_embedding");
      if (!p) m3::fail(m3::ErrorCode::internal, "model has no item embedding table");
      m3::Tensor t(p->value.shape());
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(p->value[i]);
      return t;
    });
    m3::write_embeddings(std::string(path), table);
  });
}

m3_status m3_model_score(m3_model* model, const size_t* items, const size_t* ctx_in,
                         const size_t* ctx_out, size_t n_events, const size_t* next_ctx_out,
                         double* scores, size_t n_scores, double* gates) {
  return guarded([&] {
    need(model, "model");
    need(items, "items");
    need(scores, "scores");
    model->visit([&](auto& m) {
      const auto& meta = m.meta();
      const std::size_t ni = meta.ctx_in_sizes.size(), no = meta.ctx_out_sizes.size();
      if (ni) need(ctx_in, "ctx_in");
      if (no) {
        need(ctx_out, "ctx_out");
        need(next_ctx_out, "next_ctx_out");
      }
      if (n_scores != meta.n_items) {
        m3::fail(m3::ErrorCode::shape_mismatch, "score buffer holds " + std::to_string(n_scores) +
                                                    " values, model has " +
                                                    std::to_string(meta.n_items) + " items");
      }
      std::vector<m3::Event> history(n_events);
      for (std::size_t t = 0; t < n_events; ++t) {
        history[t].item = items[t];
        if (ni) history[t].context_in.assign(ctx_in + t * ni, ctx_in + (t + 1) * ni);
        if (no) history[t].context_out.assign(ctx_out + t * no, ctx_out + (t + 1) * no);
      }
      std::vector<std::size_t> next;
      if (no) next.assign(next_ctx_out, next_ctx_out + no);
      std::array<double, 3> g{};
      const auto s = m.score_next(history, next, gates ? &g : nullptr);
      std::copy(s.begin(), s.end(), scores);
      if (gates) std::copy(g.begin(), g.end(), gates);
    });
  });
}

m3_status m3_model_train(m3_model* model, const m3_dataset* train, const m3_dataset* validation,
                         const char* train_config_json, const char* loss_csv_path,
                         m3_record_fn on_record, void* user) {
  return guarded([&] {
    need(model, "model");
    need(train, "train");
    const auto config = m3::train_config_from_json(json_or_empty(train_config_json));
    const auto result = model->visit([&](auto& m) {
      const std::string label = m.config().enabled.letters();
      return m3::train(m, train->set, validation ? &validation->set : nullptr, config,
                       forward_records(on_record, user, label));
    });
    if (loss_csv_path) m3::write_loss_csv(std::string(loss_csv_path), result.records);
  });
}

m3_status m3_evaluate(m3_model* model, const m3_dataset* test, const size_t* ns, size_t n_ns,
                      size_t threads, double* map, size_t* n_examples) {
  return guarded([&] {
    need(model, "model");
    need(test, "test");
    need(ns, "ns");
    need(map, "map");
    const auto r = model->visit([&](auto& m) {
      return m3::evaluate(m, test->set, std::span(ns, n_ns), threads);
    });
    std::copy(r.map.begin(), r.map.end(), map);
    if (n_examples) *n_examples = r.n_examples;
  });
}

m3_status m3_metrics_csv_write(const char* path, const m3_metrics_row* rows, size_t n_rows) {
  return guarded([&] {
    need(path, "path");
    if (n_rows) need(rows, "rows");
    std::vector<m3::MetricsRow> out;
    for (std::size_t i = 0; i < n_rows; ++i) {
      const auto& r = rows[i];
      need(r.model, "row model");
      need(r.subset, "row subset");
      need(r.gate_type, "row gate_type");
      need(r.ns, "row ns");
      need(r.map, "row map");
      m3::MetricsReport report{{r.ns, r.ns + r.n_ns}, {r.map, r.map + r.n_ns}, r.n_examples};
      out.push_back({r.model, r.subset, r.gate_type, std::move(report)});
    }
    m3::write_metrics_csv(std::string(path), out);
  });
}

m3_status m3_ablate(const m3_dataset* train, const m3_dataset* validation, const m3_dataset* test,
                    const char* base_config_json, const char* train_config_json,
                    const char* subsets, const size_t* ns, size_t n_ns, const char* csv_path,
                    double* map, m3_record_fn on_record, void* user) {
  return guarded([&] {
    need(train, "train");
    need(test, "test");
    need(subsets, "subsets");
    need(ns, "ns");
    const auto base = m3::config_from_json(json_or_empty(base_config_json));
    const auto tc = m3::train_config_from_json(json_or_empty(train_config_json));
    const auto sets = m3::parse_subsets(subsets);
    std::function<void(const m3::EncoderSet&, const m3::LossRecord&)> cb;
    if (on_record) {
      cb = [&](const m3::EncoderSet& s, const m3::LossRecord& r) {
        forward_records(on_record, user, s.letters())(r);
      };
    }
    const auto results = m3::ablate(train->set, validation ? &validation->set : nullptr, test->set,
                                    base, sets, tc, std::span(ns, n_ns), cb);
    if (csv_path) m3::write_metrics_csv(std::string(csv_path), m3::ablation_rows(base, results));
    if (map) {
      for (std::size_t i = 0; i < results.size(); ++i) {
        std::copy(results[i].report.map.begin(), results[i].report.map.end(), map + i * n_ns);
      }
    }
  });
}

m3_status m3_gate_report(m3_model* model, const m3_dataset* data, const char* group_by,
                         const char* const* labels, size_t n_labels, const char* csv_path) {
  return guarded([&] {
    need(model, "model");
    need(data, "data");
    need(csv_path, "csv_path");
    if (n_labels) need(labels, "labels");
    std::map<std::size_t, std::string> names;
    for (std::size_t i = 0; i < n_labels; ++i) {
      need(labels[i], "label");
      names[i] = labels[i];
    }
    const auto rows = model->visit([&](auto& m) {
      const auto key = m3::GroupKey::parse(group_by ? group_by : "context", m.meta());
      return m3::gate_report(m, data->set, key);
    });
    std::ofstream out(csv_path);
    if (!out) m3::fail(m3::ErrorCode::io, std::string("cannot open ") + csv_path + " for writing");
    m3::write_gate_csv(out, rows, names);
    if (!out) m3::fail(m3::ErrorCode::io, std::string("write failed: ") + csv_path);
  });
}

m3_status m3_lrd_profile(const m3_dataset* sequences, const char* embeddings_path,
                         const size_t* lags, size_t n_lags, size_t threads, const char* csv_path,
                         double* dep, double* slope) {
  return guarded([&] {
    need(sequences, "sequences");
    need(embeddings_path, "embeddings_path");
    need(lags, "lags");
    const auto q = m3::read_embeddings(std::string(embeddings_path));
    const auto p = m3::dep_profile(sequences->set.sequences, q, std::span(lags, n_lags), threads);
    if (csv_path) m3::write_profile_csv(std::string(csv_path), p);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    if (dep) {
      for (std::size_t i = 0; i < n_lags; ++i) dep[i] = p.dep[i].value_or(nan);
    }
    if (slope) *slope = p.slope.value_or(nan);
  });
}

}  // extern "C"
