#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dualteacher/losses.hpp"
#include "dualteacher/metrics.hpp"
#include "dualteacher/phantom.hpp"
#include "dualteacher/rng.hpp"

using namespace dualteacher;

namespace {

LabelMap random_labels(int h, int w, int classes, Rng& rng) {
  LabelMap m(h, w, 0);
  for (auto& l : m.lab) l = static_cast<std::uint8_t>(rng.below(classes));
  return m;
}

// independent pixel-counting oracle
double dice_oracle(const LabelMap& pred, const LabelMap& truth, int c) {
  std::size_t inter = 0, np = 0, nt = 0;
  for (std::size_t i = 0; i < pred.lab.size(); ++i) {
    const bool p = pred.lab[i] == c, t = truth.lab[i] == c;
    inter += p && t;
    np += p;
    nt += t;
  }
  if (np + nt == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(np + nt);
}

std::string temp_dir() {
  auto dir = std::filesystem::temp_directory_path() / "dt_metrics_test";
  std::filesystem::create_directories(dir);
  return dir.string();
}

}  // namespace

TEST_CASE("dice coefficient basics") {
  LabelMap a(2, 2, 0);
  a.lab = {1, 1, 0, 0};
  CHECK(dice_coefficient(a, a, 1) == 1.0);

  LabelMap b(2, 2, 0);
  b.lab = {0, 0, 1, 1};
  CHECK(dice_coefficient(a, b, 1) == 0.0);

  // |P| = |T| = 4, overlap 2 -> 0.5
  LabelMap p(2, 4, 0), t(2, 4, 0);
  p.lab = {1, 1, 1, 1, 0, 0, 0, 0};
  t.lab = {1, 1, 0, 0, 1, 1, 0, 0};
  CHECK(dice_coefficient(p, t, 1) == 0.5);

  // both empty -> 1.0 by convention
  CHECK(dice_coefficient(a, a, 3) == 1.0);

  LabelMap wrong(3, 2, 0);
  CHECK_THROWS_AS(dice_coefficient(a, wrong, 1), DimensionError);
}

TEST_CASE("dice coefficient is symmetric and matches the counting oracle") {
  Rng rng(21, "metrics-oracle");
  for (int trial = 0; trial < 10; ++trial) {
    LabelMap p = random_labels(8, 8, 4, rng);
    LabelMap t = random_labels(8, 8, 4, rng);
    for (int c = 0; c < 4; ++c) {
      const double d = dice_coefficient(p, t, c);
      CHECK(d == Catch::Approx(dice_oracle(p, t, c)).margin(1e-12));
      CHECK(d == dice_coefficient(t, p, c));
      CHECK(d >= 0.0);
      CHECK(d <= 1.0);
    }
  }
}

TEST_CASE("one minus dice_loss agrees with hard dice on one-hot predictions") {
  Rng rng(23, "metrics-consistency");
  for (int trial = 0; trial < 5; ++trial) {
    const int C = trial % 2 == 0 ? 2 : 5;
    LabelMap pred = random_labels(6, 6, C, rng);
    LabelMap truth = random_labels(6, 6, C, rng);
    ProbMap onehot(6, 6, C);
    for (std::size_t i = 0; i < pred.lab.size(); ++i) onehot.p[i * C + pred.lab[i]] = 1.0;
    double mean_hard = 0.0;
    for (int c = 0; c < C; ++c) mean_hard += dice_coefficient(pred, truth, c);
    mean_hard /= C;
    CHECK(1.0 - dice_loss(onehot, truth) == Catch::Approx(mean_hard).margin(1e-4));
  }
}

TEST_CASE("evaluate_model with zeroed weights predicts pure background") {
  NetworkConfig nc;
  nc.num_classes = 3;
  nc.base_channels = 4;
  nc.depth = 1;
  nc.seed = 5;
  Network net(nc);
  for (auto& p : net.params()) p = 0.0;

  PhantomSpec spec;
  spec.image_size = 16;
  spec.num_classes = 3;
  spec.intensity_table_target = {0.1, 0.5, 0.9};
  spec.intensity_table_source = {0.2, 0.6, 0.95};
  spec.seed = 3;
  auto samples = generate_dataset(spec, 1, 4);
  std::vector<DomainSample> val(samples.begin() + 1, samples.end());

  MetricsRecord rec = evaluate_model(net, val);
  CHECK(rec.n_images == 4);

  // zero weights -> all-equal logits -> argmax picks background everywhere;
  // per-image averaging oracle
  std::vector<double> expect(3, 0.0);
  for (const auto& s : val) {
    LabelMap all_bg(s.image.h, s.image.w, 0);
    for (int c = 0; c < 3; ++c) expect[c] += dice_oracle(all_bg, *s.label, c);
  }
  for (int c = 0; c < 3; ++c) {
    expect[c] /= static_cast<double>(val.size());
    CHECK(rec.per_class_dice.at(c) == Catch::Approx(expect[c]).margin(1e-12));
  }
  CHECK(rec.mean_dice == Catch::Approx((expect[1] + expect[2]) / 2.0).margin(1e-12));
  CHECK(rec.per_class_dice.at(0) > 0.0);
}

TEST_CASE("evaluate_model rejects unlabeled samples naming the id") {
  NetworkConfig nc;
  nc.num_classes = 3;
  nc.base_channels = 4;
  nc.depth = 1;
  Network net(nc);
  DomainSample s;
  s.id = "target-0007";
  s.domain = Domain::target;
  s.image = Image(16, 16, 0.5);
  try {
    evaluate_model(net, {s});
    FAIL("expected InputError");
  } catch (const InputError& e) {
    CHECK(std::string(e.what()).find("target-0007") != std::string::npos);
  }
}

TEST_CASE("mean_dice averages exactly the foreground classes") {
  Rng rng(29, "metrics-mean");
  NetworkConfig nc;
  nc.num_classes = 4;
  nc.base_channels = 4;
  nc.depth = 1;
  nc.seed = 11;
  Network net(nc);

  PhantomSpec spec;
  spec.image_size = 16;
  spec.num_classes = 4;
  spec.intensity_table_target = {0.1, 0.4, 0.7, 1.0};
  spec.intensity_table_source = {0.15, 0.45, 0.75, 0.95};
  spec.seed = 7;
  auto samples = generate_dataset(spec, 1, 4);
  std::vector<DomainSample> val(samples.begin() + 1, samples.end());
  MetricsRecord rec = evaluate_model(net, val);
  double fg = 0.0;
  for (int c = 1; c < 4; ++c) fg += rec.per_class_dice.at(c);
  CHECK(rec.mean_dice == Catch::Approx(fg / 3.0).margin(1e-9));
  for (const auto& [c, d] : rec.per_class_dice) {
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
  }
}

TEST_CASE("aggregate_folds means, stds, and ordering") {
  MetricsRecord a;
  a.method = "m1";
  a.per_class_dice = {{0, 0.9}, {1, 0.6}, {2, 0.8}};
  a.mean_dice = 0.7;
  MetricsRecord b = a;
  b.mean_dice = 0.9;
  b.per_class_dice[1] = 0.8;
  MetricsRecord c;
  c.method = "m0";
  c.per_class_dice = {{0, 1.0}, {1, 1.0}, {2, 1.0}};
  c.mean_dice = 1.0;

  SECTION("single record: mean equals record, std zero") {
    auto rows = aggregate_folds({a});
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].mean_mean == Catch::Approx(0.7));
    CHECK(rows[0].mean_std == 0.0);
    CHECK(rows[0].class_mean[0] == Catch::Approx(0.6));
  }
  SECTION("two records average, first-seen method order") {
    auto rows = aggregate_folds({a, b, c});
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].method == "m1");
    CHECK(rows[1].method == "m0");
    CHECK(rows[0].mean_mean == Catch::Approx(0.8));
    CHECK(rows[0].class_mean[0] == Catch::Approx(0.7));
    CHECK(rows[0].n_runs == 2);
  }
  SECTION("empty input rejected") {
    CHECK_THROWS_AS(aggregate_folds({}), ReportError);
  }
}

TEST_CASE("rendered table lists classes then avg") {
  MetricsRecord a;
  a.method = "dual_teacher";
  a.per_class_dice = {{0, 0.9}, {1, 0.6}, {2, 0.8}};
  a.mean_dice = 0.7;
  const std::string table = render_table(aggregate_folds({a}), 3);
  CHECK(table.find("method") != std::string::npos);
  CHECK(table.find("c1") != std::string::npos);
  CHECK(table.find("c2") != std::string::npos);
  CHECK(table.find("avg") != std::string::npos);
  CHECK(table.find("dual_teacher") != std::string::npos);
  CHECK(table.find("0.7000") != std::string::npos);
}

TEST_CASE("csv schema and values round-trip") {
  MetricsRecord a;
  a.method = "mean_teacher";
  a.seed = 3;
  a.fold_index = 1;
  a.per_class_dice = {{0, 0.5}, {1, 0.25}, {2, 0.75}};
  a.mean_dice = 0.5;

  const std::string path = temp_dir() + "/metrics.csv";
  write_metrics_csv(path, {a});
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "method,seed,fold,class,dice");
  std::string line;
  int rows = 0;
  bool saw_mean = false;
  double c1 = -1.0;
  while (std::getline(in, line)) {
    ++rows;
    std::istringstream ss(line);
    std::string method, seed, fold, cls, dice;
    std::getline(ss, method, ',');
    std::getline(ss, seed, ',');
    std::getline(ss, fold, ',');
    std::getline(ss, cls, ',');
    std::getline(ss, dice, ',');
    CHECK(method == "mean_teacher");
    CHECK(seed == "3");
    CHECK(fold == "1");
    if (cls == "mean") saw_mean = true;
    if (cls == "1") c1 = std::stod(dice);
  }
  CHECK(rows == 3);  // class 1, class 2, mean (foreground only)
  CHECK(saw_mean);
  CHECK(c1 == 0.25);
  std::filesystem::remove_all(temp_dir());
}
