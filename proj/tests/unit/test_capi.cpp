#include "unit/doctest_main.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "m3/m3.h"

namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "m3_capi_test";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string take(char* s) {
  std::string out = s ? s : "";
  m3_string_free(s);
  return out;
}

struct Splits {
  m3_dataset* train = nullptr;
  m3_dataset* validation = nullptr;
  m3_dataset* test = nullptr;
  ~Splits() {
    m3_dataset_free(train);
    m3_dataset_free(validation);
    m3_dataset_free(test);
  }
};

void make_splits(const char* kind, const char* params, Splits& s) {
  m3_dataset* full = nullptr;
  REQUIRE(m3_synthetic_generate(kind, params, 3, &full) == M3_OK);
  const char* cfg = R"({"min_length": 5, "window": 10, "min_item_count": 1})";
  REQUIRE(m3_dataset_prepare(full, cfg, 3, &s.train, &s.validation, &s.test) == M3_OK);
  m3_dataset_free(full);
}

constexpr const char* kModel = R"({"d_in": 8, "d_enc": 8, "d_out": 8, "embed_dim": 8})";
constexpr const char* kTrain = R"({"epochs": 2, "batch_size": 16, "negatives": 10})";

}  // namespace

TEST_CASE("status names and error reporting") {
  CHECK(std::string(m3_version()) == "0.1.0");
  CHECK(std::string(m3_status_name(M3_ERR_VOCABULARY_MISMATCH)) == "vocabulary_mismatch");
  m3_dataset* d = nullptr;
  CHECK(m3_dataset_read(nullptr, &d) == M3_ERR_INVALID_ARGUMENT);
  CHECK(std::string(m3_last_error()).find("path") != std::string::npos);
  CHECK(m3_dataset_read("/nonexistent/windows.tsv", &d) == M3_ERR_IO);
  CHECK(std::string(m3_last_error()).find("/nonexistent/windows.tsv") != std::string::npos);
  CHECK(d == nullptr);

  char* out = nullptr;
  CHECK(m3_model_config_resolve(R"({"d_inn": 3})", &out) == M3_ERR_INVALID_ARGUMENT);
  CHECK(std::string(m3_last_error()).find("d_inn") != std::string::npos);
  CHECK(m3_train_config_resolve("{not json", &out) != M3_OK);
  CHECK(m3_synthetic_generate("uniform", nullptr, 1, &d) == M3_ERR_INVALID_ARGUMENT);
  m3_dataset_free(nullptr);
  m3_model_free(nullptr);
}

TEST_CASE("resolved configs carry defaults") {
  char* out = nullptr;
  REQUIRE(m3_model_config_resolve(R"({"gate": "fixed"})", &out) == M3_OK);
  const auto model = take(out);
  CHECK(model.find("\"gate\":\"fixed\"") != std::string::npos);
  CHECK(model.find("\"encoders\":\"TSL\"") != std::string::npos);
  REQUIRE(m3_dataset_config_json("ml20m-s", &out) == M3_OK);
  const auto data = take(out);
  CHECK(data.find("\"window\":20") != std::string::npos);
  CHECK(data.find("\"max_length\":50") != std::string::npos);
  REQUIRE(m3_train_config_resolve(nullptr, &out) == M3_OK);
  CHECK(take(out).find("\"epochs\":10") != std::string::npos);
}

TEST_CASE("train, evaluate, save and reload through the C API") {
  Splits s;
  make_splits("markov", R"({"vocab": 20, "users": 120, "length": 20})", s);
  CHECK(m3_dataset_size(s.train) > m3_dataset_size(s.test));

  m3_model* model = nullptr;
  REQUIRE(m3_model_create(kModel, s.train, 1, &model) == M3_OK);
  CHECK(m3_model_items(model) == 20);
  std::vector<std::size_t> epochs;
  auto record = [](void* user, const char* label, size_t epoch, size_t, double loss, double) {
    CHECK(std::string(label) == "TSL");
    CHECK(std::isfinite(loss));
    static_cast<std::vector<std::size_t>*>(user)->push_back(epoch);
  };
  const auto loss_csv = scratch("loss.csv");
  REQUIRE(m3_model_train(model, s.train, s.validation, kTrain, loss_csv.c_str(), record, &epochs) ==
          M3_OK);
  CHECK(epochs == std::vector<std::size_t>{0, 1, 2});
  CHECK(slurp(loss_csv).rfind("epoch,step,loss,val_map20\n", 0) == 0);

  const std::size_t ns[] = {5, 10, 20};
  double map[3];
  std::size_t n = 0;
  REQUIRE(m3_evaluate(model, s.test, ns, 3, 1, map, &n) == M3_OK);
  CHECK(n == m3_dataset_size(s.test));
  CHECK(map[0] <= map[1]);
  CHECK(map[1] <= map[2]);

  const std::size_t items[] = {1, 4, 2};
  double scores[20], gates[3];
  REQUIRE(m3_model_score(model, items, nullptr, nullptr, 3, nullptr, scores, 20, gates) == M3_OK);
  for (double g : gates) CHECK((g > 0 && g < 1));
  double small[5];
  CHECK(m3_model_score(model, items, nullptr, nullptr, 3, nullptr, small, 5, nullptr) ==
        M3_ERR_SHAPE_MISMATCH);

  const auto ck = scratch("model.m3ck");
  REQUIRE(m3_model_save(model, ck.c_str()) == M3_OK);
  m3_model* back = nullptr;
  REQUIRE(m3_model_load(ck.c_str(), &back) == M3_OK);
  double again[20];
  REQUIRE(m3_model_score(back, items, nullptr, nullptr, 3, nullptr, again, 20, nullptr) == M3_OK);
  for (int i = 0; i < 20; ++i) CHECK(again[i] == scores[i]);
  char* c1 = nullptr;
  char* c2 = nullptr;
  REQUIRE(m3_model_config(model, &c1) == M3_OK);
  REQUIRE(m3_model_config(back, &c2) == M3_OK);
  CHECK(take(c1) == take(c2));

  const auto ck2 = scratch("model2.m3ck");
  REQUIRE(m3_model_save(back, ck2.c_str()) == M3_OK);
  CHECK(slurp(ck) == slurp(ck2));

  const auto metrics = scratch("metrics.csv");
  const m3_metrics_row row{"m3r", "TSL", "bottom", ns, map, 3, n};
  REQUIRE(m3_metrics_csv_write(metrics.c_str(), &row, 1) == M3_OK);
  CHECK(slurp(metrics).rfind("model,subset,gate_type,map5,map10,map20,n_examples\nm3r,TSL,bottom,", 0) == 0);

  m3_model_free(back);
  m3_model_free(model);
}

TEST_CASE("vocabulary mismatch is reported") {
  Splits a, b;
  make_splits("markov", R"({"vocab": 20, "users": 40, "length": 12})", a);
  make_splits("markov", R"({"vocab": 25, "users": 40, "length": 12})", b);
  m3_model* model = nullptr;
  REQUIRE(m3_model_create(kModel, a.train, 1, &model) == M3_OK);
  const std::size_t ns[] = {5};
  double map[1];
  CHECK(m3_evaluate(model, b.test, ns, 1, 1, map, nullptr) == M3_ERR_VOCABULARY_MISMATCH);
  m3_model_free(model);
}

TEST_CASE("ablation rows repeat under equal seeds") {
  Splits s;
  make_splits("markov", R"({"vocab": 15, "users": 60, "length": 12})", s);
  const std::size_t ns[] = {5, 10, 20};
  double map[9];
  const auto csv = scratch("ablate.csv");
  REQUIRE(m3_ablate(s.train, s.validation, s.test, kModel, R"({"epochs": 1, "negatives": 5})",
                    "T, TSL,T", ns, 3, csv.c_str(), map, nullptr, nullptr) == M3_OK);
  for (int k = 0; k < 3; ++k) CHECK(map[k] == map[6 + k]);
  const auto text = slurp(csv);
  CHECK(std::count(text.begin(), text.end(), '\n') == 4);
  CHECK(text.find("\nm3r,T,bottom,") != std::string::npos);
  CHECK(text.find("\nm3r,TSL,bottom,") != std::string::npos);
  CHECK(m3_ablate(s.train, nullptr, s.test, kModel, nullptr, "TQ", ns, 3, nullptr, nullptr, nullptr,
                  nullptr) == M3_ERR_INVALID_ARGUMENT);
}

TEST_CASE("gate report and lrd profile files") {
  Splits s;
  make_splits("mixed-context", R"({"vocab": 20, "users": 60, "length": 12})", s);
  m3_model* model = nullptr;
  REQUIRE(m3_model_create(R"({"d_in": 24, "d_enc": 8, "d_out": 8, "gate": "contextual"})", s.train,
                          1, &model) == M3_OK);
  const char* labels[] = {"home", "detail"};
  const auto gates = scratch("gates.csv");
  REQUIRE(m3_gate_report(model, s.test, "context", labels, 2, gates.c_str()) == M3_OK);
  const auto text = slurp(gates);
  CHECK(text.rfind("group,count,gate_t,gate_s,gate_l\n", 0) == 0);
  CHECK(text.find("\nhome,") != std::string::npos);
  CHECK(text.find("\ndetail,") != std::string::npos);

  const auto emb = scratch("emb.txt");
  REQUIRE(m3_model_write_embeddings(model, emb.c_str()) == M3_OK);
  const std::size_t lags[] = {1, 2, 50};
  double dep[3], slope = 0;
  const auto prof = scratch("profile.csv");
  REQUIRE(m3_lrd_profile(s.test, emb.c_str(), lags, 3, 1, prof.c_str(), dep, &slope) == M3_OK);
  CHECK(std::isfinite(dep[0]));
  CHECK(std::isnan(dep[2]));
  CHECK(slurp(prof).rfind("lag,dep,n_samples\n", 0) == 0);
  const std::size_t bad[] = {2, 1};
  CHECK(m3_lrd_profile(s.test, emb.c_str(), bad, 2, 1, nullptr, nullptr, nullptr) ==
        M3_ERR_INVALID_ARGUMENT);
  m3_model_free(model);
}
