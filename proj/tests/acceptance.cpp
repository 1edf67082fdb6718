// Acceptance checklist. Each criterion prints exactly one PASS/FAIL line;
// the process exits 0 only if every criterion passes. Tolerances are pinned
// here, not configurable.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "dualteacher/checkpoint.hpp"
#include "dualteacher/experiment.hpp"
#include "dualteacher/trainer.hpp"

using namespace dualteacher;
namespace fs = std::filesystem;

namespace {

struct Failure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void check(bool cond, const std::string& msg) {
  if (!cond) throw Failure(msg);
}

std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  return buf;
}

double mean(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---- shared fixtures -------------------------------------------------------

PhantomSpec tiny_spec() {
  PhantomSpec spec;
  spec.image_size = 16;
  spec.num_classes = 3;
  spec.intensity_table_target = {0.10, 0.50, 0.90};
  spec.intensity_table_source = {0.25, 0.60, 0.95};
  spec.noise_sigma = 0.05;
  spec.seed = 23;
  return spec;
}

const DatasetBundle& tiny_bundle() {
  static DatasetBundle bundle = [] {
    auto samples = generate_dataset(tiny_spec(), 6, 8);
    return make_folds(samples, tiny_spec(), 4, 1.0 / 3.0, 23)[0];
  }();
  return bundle;
}

TrainConfig tiny_cfg(Method m, int epochs) {
  TrainConfig cfg;
  cfg.method = m;
  cfg.epochs = epochs;
  cfg.batch_s = cfg.batch_t = cfg.batch_u = 2;
  cfg.learning_rate = 1e-3;
  cfg.seed = 5;
  cfg.net.base_channels = 4;
  cfg.net.depth = 1;
  return cfg;
}

// full-size dataset: 40 source + 40 target, 64x64, 5 classes, fold 0
const DatasetBundle& bench_bundle() {
  static DatasetBundle bundle = [] {
    PhantomSpec spec;  // defaults
    auto samples = generate_dataset(spec, 40, 40);
    return make_folds(samples, spec, 4, 1.0 / 3.0, 0)[0];
  }();
  return bundle;
}

// ---- benchmark matrix for criteria 5 and 6 ---------------------------------

constexpr double kRunBudgetSeconds = 300.0;
const std::vector<std::uint64_t> kSeeds = {0, 1, 2};

struct Matrix {
  std::map<std::string, std::vector<double>> best;     // method -> best val dice per seed
  std::map<std::string, std::vector<double>> seconds;  // method -> wall time per seed
};

Matrix compute_matrix() {
  const std::vector<Method> methods = {
      Method::supervised_only, Method::mean_teacher,     Method::dual_teacher,
      Method::no_inter_teacher, Method::no_intra_teacher, Method::gan_baseline,
      Method::pseudo_label_baseline};
  struct Job {
    Method m;
    std::size_t seed_idx;
  };
  std::vector<Job> jobs;
  for (Method m : methods)
    for (std::size_t i = 0; i < kSeeds.size(); ++i) jobs.push_back({m, i});

  Matrix mx;
  for (Method m : methods) {
    mx.best[to_string(m)].resize(kSeeds.size(), 0.0);
    mx.seconds[to_string(m)].resize(kSeeds.size(), 0.0);
  }

  const DatasetBundle& bundle = bench_bundle();
  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr first_error;
  auto work = [&] {
    while (true) {
      Job job;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= jobs.size() || first_error) return;
        job = jobs[next++];
      }
      try {
        TrainConfig cfg;  // full defaults: 50 epochs, batch 4, lr 1e-4
        cfg.method = job.m;
        cfg.seed = kSeeds[job.seed_idx];
        const auto t0 = std::chrono::steady_clock::now();
        TrainState st = train(cfg, bundle);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::lock_guard<std::mutex> lock(mu);
        mx.best[to_string(job.m)][job.seed_idx] = st.best_val;
        mx.seconds[to_string(job.m)][job.seed_idx] = secs;
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  for (int i = 0; i < worker_count(jobs.size()); ++i) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
  return mx;
}

const Matrix& matrix() {
  static Matrix mx;
  static std::exception_ptr err;
  static bool done = false;
  if (!done) {
    try {
      mx = compute_matrix();
    } catch (...) {
      err = std::current_exception();
    }
    done = true;
  }
  if (err) std::rethrow_exception(err);
  return mx;
}

void check_budget(const Matrix& mx, const std::vector<std::string>& methods) {
  for (const auto& m : methods)
    for (std::size_t i = 0; i < kSeeds.size(); ++i)
      check(mx.seconds.at(m)[i] < kRunBudgetSeconds,
            m + " seed " + std::to_string(kSeeds[i]) + " took " + fmt(mx.seconds.at(m)[i], 1) +
                "s (budget " + fmt(kRunBudgetSeconds, 0) + "s)");
}

// ---- criterion 1: closed-form schedule and average -------------------------

void criterion_formulas() {
  LossWeights w;  // lambda_con_max 0.1, scale 5, t_max 50
  check(lambda_con(0.0, w) == 0.1 * std::exp(-5.0),
        "lambda_con(0) != 0.1*exp(-5) bit-for-bit");
  check(lambda_con(static_cast<double>(w.t_max), w) == 0.1,
        "lambda_con(t_max) != 0.1 bit-for-bit");
  check(lambda_con(25.0, w) == 0.1 * std::exp(-5.0 * 0.25),
        "lambda_con(t_max/2) mismatch");

  // theta'_t = theta + alpha^t (theta'_0 - theta) for a frozen student
  const double alpha = 0.99;
  std::vector<double> student(8), teacher0(8);
  for (int i = 0; i < 8; ++i) {
    student[i] = 0.1 * i - 0.3;
    teacher0[i] = 1.0 - 0.05 * i;
  }
  EmaState ema = ema_init(teacher0, alpha);
  for (int t = 1; t <= 100; ++t) {
    ema_update(ema, student);
    for (int i = 0; i < 8; ++i) {
      const double want = student[i] + std::pow(alpha, t) * (teacher0[i] - student[i]);
      check(std::abs(ema.teacher_params[i] - want) <= 1e-12,
            "EMA closed form off at t=" + std::to_string(t));
    }
  }
  check(ema.step == 100, "EMA step counter wrong");

  // the reported step total recomposes from its parts
  TrainState st = make_method_state(tiny_cfg(Method::dual_teacher, 4), tiny_bundle());
  StepLosses sl = train_step_dual_teacher(st, {0, 1}, {0, 1}, {0, 1});
  const LossWeights& lw = st.cfg.loss_weights;
  check(sl.lambda == lambda_con(1.0, lw), "reported lambda is not lambda_con(t)");
  const double recomposed = sl.seg + lw.lambda_kd * sl.kd + sl.lambda * sl.con + sl.pseudo;
  check(std::abs(sl.total - recomposed) <= 1e-6,
        "step total " + fmt(sl.total, 9) + " != recomposed " + fmt(recomposed, 9));
}

// ---- criterion 2: analytic gradients vs central finite differences ---------

void criterion_gradients() {
  constexpr double kStep = 1e-4;
  constexpr double kRelTol = 1e-3;
  constexpr int kInstances = 20;
  const int H = 4, W = 4, C = 3;

  Rng rng(97, "acceptance-fd");
  auto random_probs = [&] {
    ProbMap p(H, W, C);
    for (auto& v : p.p) v = rng.uniform(0.1, 0.9);
    return p;
  };
  auto random_target = [&] {
    LabelMap t(H, W, 0);
    for (auto& l : t.lab) l = static_cast<std::uint8_t>(rng.below(C));
    return t;
  };
  auto check_grads = [&](const char* name, const std::function<double(const ProbMap&)>& loss,
                         const ProbMap& p, const ProbMap& analytic) {
    for (std::size_t i = 0; i < p.p.size(); ++i) {
      ProbMap hi = p, lo = p;
      hi.p[i] += kStep;
      lo.p[i] -= kStep;
      const double fd = (loss(hi) - loss(lo)) / (2.0 * kStep);
      const double an = analytic.p[i];
      const double tol = kRelTol * std::max(std::abs(fd), std::abs(an)) + 1e-8;
      check(std::abs(fd - an) <= tol, std::string(name) + " grad mismatch at coord " +
                                          std::to_string(i) + ": analytic " + fmt(an, 8) +
                                          " vs fd " + fmt(fd, 8));
    }
  };

  for (int inst = 0; inst < kInstances; ++inst) {
    const ProbMap p = random_probs();
    const LabelMap t = random_target();
    const ProbMap q = random_probs();  // teacher / other branch

    ProbMap d_ce(H, W, C);
    cross_entropy_grad(p, t, 1.0, d_ce);
    check_grads("cross_entropy", [&](const ProbMap& x) { return cross_entropy(x, t); }, p, d_ce);

    ProbMap d_dice(H, W, C);
    dice_loss_grad(p, t, 1.0, d_dice);
    check_grads("dice_loss", [&](const ProbMap& x) { return dice_loss(x, t); }, p, d_dice);

    ProbMap d_kd(H, W, C);
    kd_loss_grad_student(q, p, 1.0, d_kd);
    check_grads("kd_loss", [&](const ProbMap& x) { return kd_loss(q, x); }, p, d_kd);

    ProbMap d_con(H, W, C);
    consistency_loss_grad_student(p, q, 1.0, d_con);
    check_grads("consistency_loss", [&](const ProbMap& x) { return consistency_loss(x, q); }, p,
                d_con);
  }

  // the student step must leave both teachers' gradient buffers untouched
  TrainState st = make_method_state(tiny_cfg(Method::dual_teacher, 4), tiny_bundle());
  st.phase_hook = [&](const std::string& phase) {
    if (phase == "inter_teacher")
      std::fill(st.inter_teacher->grads().begin(), st.inter_teacher->grads().end(), 0.0);
  };
  train_step_dual_teacher(st, {0, 1}, {0, 1}, {0, 1});
  for (double g : st.inter_teacher->grads())
    check(g == 0.0, "inter-teacher picked up gradient from the student step");
  for (double g : st.intra_scratch->grads())
    check(g == 0.0, "intra-teacher picked up gradient from the student step");
}

// ---- criterion 3: metric and alignment oracles ------------------------------

void criterion_oracles() {
  Rng rng(3, "acceptance-oracles");

  // dice vs brute-force confusion counts, 100 random 8x8 pairs
  for (int trial = 0; trial < 100; ++trial) {
    LabelMap a(8, 8, 0), b(8, 8, 0);
    for (auto& l : a.lab) l = static_cast<std::uint8_t>(rng.below(4));
    for (auto& l : b.lab) l = static_cast<std::uint8_t>(rng.below(4));
    for (int c = 0; c < 4; ++c) {
      std::size_t tp = 0, np = 0, nt = 0;
      for (std::size_t i = 0; i < a.lab.size(); ++i) {
        np += a.lab[i] == c;
        nt += b.lab[i] == c;
        tp += a.lab[i] == c && b.lab[i] == c;
      }
      const double want =
          (np + nt == 0) ? 1.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(np + nt);
      check(std::abs(dice_coefficient(a, b, c) - want) <= 1e-12,
            "dice differs from confusion-count oracle");
    }
  }

  // histogram matching against a 4-pixel hand-computed CDF mapping
  {
    Image ref(1, 4);
    ref.pix = {0.2, 0.4, 0.6, 0.8};
    Translator tr = fit_translator({&ref}, Translator::Kind::histogram_match);
    Image src(1, 4);
    src.pix = {0.0, 0.25, 0.5, 0.75};
    Image out = translate(tr, src);
    // source bins {0,64,128,192} -> cdf {.25,.5,.75,1}; reference bins
    // {51,102,153,204} reach those masses exactly at 51,102,153,204
    const std::vector<double> want = {51.0 / 255.0, 102.0 / 255.0, 153.0 / 255.0, 204.0 / 255.0};
    for (int i = 0; i < 4; ++i)
      check(std::abs(out.pix[i] - want[i]) <= 1e-12,
            "histogram mapping differs from the hand oracle at pixel " + std::to_string(i));
  }

  // argmax vs a first-maximum scan
  for (int trial = 0; trial < 20; ++trial) {
    ProbMap p(8, 8, 5);
    for (auto& v : p.p) v = rng.uniform();
    LabelMap lm = argmax_labels(p);
    for (std::size_t i = 0; i < p.npix(); ++i) {
      int best = 0;
      for (int c = 1; c < 5; ++c)
        if (p.p[i * 5 + c] > p.p[i * 5 + best]) best = c;
      check(lm.lab[i] == best, "argmax differs from the brute-force scan");
    }
  }
}

// ---- criterion 4: three-phase step order ------------------------------------

void criterion_phase_order() {
  TrainState st = make_method_state(tiny_cfg(Method::dual_teacher, 4), tiny_bundle());
  std::vector<std::string> phases;
  std::vector<double> stu_init = st.student->params();
  std::vector<double> inter_init = st.inter_teacher->params();
  std::vector<double> tea_init = st.ema->teacher_params;
  bool inter_moved_first = false, student_frozen_through_ema = false, ema_moved_second = false;

  st.phase_hook = [&](const std::string& phase) {
    phases.push_back(phase);
    if (phase == "inter_teacher") {
      inter_moved_first = st.inter_teacher->params() != inter_init &&
                          st.student->params() == stu_init &&
                          st.ema->teacher_params == tea_init;
    } else if (phase == "ema") {
      ema_moved_second = st.ema->step == 1;
      student_frozen_through_ema = st.student->params() == stu_init;
    }
  };
  train_step_dual_teacher(st, {0, 1}, {0, 1}, {0, 1});

  check(phases == std::vector<std::string>{"inter_teacher", "ema", "student"},
        "phase order is not inter-teacher, ema, student");
  check(inter_moved_first, "inter-teacher phase did not run first in isolation");
  check(ema_moved_second, "EMA phase did not run second");
  check(student_frozen_through_ema, "student weights changed before the student phase");
  check(st.student->params() != stu_init, "student phase did not update the student");

  // EMA recursion, second step: theta'_2 = a theta'_1 + (1-a) theta_1, where
  // theta_1 is the student *before* this step's optimizer update
  const std::vector<double> tea_after_1 = st.ema->teacher_params;
  const std::vector<double> stu_after_1 = st.student->params();
  st.phase_hook = nullptr;
  train_step_dual_teacher(st, {2, 3}, {0, 1}, {2, 3});

  EmaState expect{st.cfg.ema_alpha, 0, tea_after_1};
  ema_update(expect, stu_after_1);
  for (std::size_t i = 0; i < expect.teacher_params.size(); ++i)
    check(st.ema->teacher_params[i] == expect.teacher_params[i],
          "EMA recursion is not bit-for-bit at coordinate " + std::to_string(i));
  check(st.ema->step == 2, "EMA step counter wrong after two steps");

  // flag order: student first, then EMA sees the post-update weights
  TrainConfig cfg = tiny_cfg(Method::dual_teacher, 4);
  cfg.ema_after_student = true;
  TrainState flipped = make_method_state(cfg, tiny_bundle());
  std::vector<std::string> flipped_phases;
  std::vector<double> stu_at_hook;
  flipped.phase_hook = [&](const std::string& phase) {
    flipped_phases.push_back(phase);
    if (phase == "student") stu_at_hook = flipped.student->params();
  };
  const std::vector<double> tea0 = flipped.ema->teacher_params;
  train_step_dual_teacher(flipped, {0, 1}, {0, 1}, {0, 1});
  check(flipped_phases == std::vector<std::string>{"inter_teacher", "student", "ema"},
        "ema_after_student does not reorder the phases");
  EmaState expect2{cfg.ema_alpha, 0, tea0};
  ema_update(expect2, stu_at_hook);
  for (std::size_t i = 0; i < expect2.teacher_params.size(); ++i)
    check(flipped.ema->teacher_params[i] == expect2.teacher_params[i],
          "flipped EMA did not consume the post-update student");
}

// ---- criterion 5: table1 suite ordering -----------------------------------

void criterion_table1() {
  const Matrix& mx = matrix();
  check_budget(mx, {"supervised_only", "mean_teacher", "dual_teacher"});

  const double sup = mean(mx.best.at("supervised_only"));
  const double mt = mean(mx.best.at("mean_teacher"));
  const double dual = mean(mx.best.at("dual_teacher"));
  std::printf("  supervised %s  mean_teacher %s  dual_teacher %s\n", fmt(sup).c_str(),
              fmt(mt).c_str(), fmt(dual).c_str());

  check(mt >= sup, "mean_teacher " + fmt(mt) + " < supervised_only " + fmt(sup));
  check(dual >= mt, "dual_teacher " + fmt(dual) + " < mean_teacher " + fmt(mt));
  check(dual - sup >= 0.02,
        "dual-supervised gap " + fmt(dual - sup) + " < 0.02");
}

// ---- criterion 6: table2 ablations ------------------------------------------

void criterion_table2() {
  const Matrix& mx = matrix();
  check_budget(mx, {"no_inter_teacher", "no_intra_teacher", "gan_baseline",
                    "pseudo_label_baseline"});

  const double dual = mean(mx.best.at("dual_teacher"));
  const double no_inter = mean(mx.best.at("no_inter_teacher"));
  const double no_intra = mean(mx.best.at("no_intra_teacher"));
  const double gan = mean(mx.best.at("gan_baseline"));
  const double pseudo = mean(mx.best.at("pseudo_label_baseline"));
  std::printf("  dual %s  no_inter %s  no_intra %s  gan %s  pseudo %s\n", fmt(dual).c_str(),
              fmt(no_inter).c_str(), fmt(no_intra).c_str(), fmt(gan).c_str(), fmt(pseudo).c_str());

  const double best_ablation = std::max(no_inter, no_intra);
  check(dual >= best_ablation - 0.01, "dual_teacher " + fmt(dual) +
                                          " more than 0.01 below best ablation " +
                                          fmt(best_ablation));
  check(gan >= pseudo,
        "gan_baseline " + fmt(gan) + " < pseudo_label_baseline " + fmt(pseudo));
}

// ---- criterion 7: reproducibility --------------------------------------------

void criterion_reproducibility() {
  const fs::path root = fs::temp_directory_path() / "dt_acceptance";
  fs::remove_all(root);

  const TrainConfig cfg4 = tiny_cfg(Method::dual_teacher, 4);
  TrainConfig cfg2 = cfg4;
  cfg2.epochs = 2;

  run_cell(cfg4, tiny_bundle(), (root / "a").string());
  run_cell(cfg4, tiny_bundle(), (root / "b").string());
  check(read_file(root / "a" / "metrics.jsonl") == read_file(root / "b" / "metrics.jsonl"),
        "identical reruns produced different metrics.jsonl bytes");
  check(read_file(root / "a" / "checkpoint.json") == read_file(root / "b" / "checkpoint.json"),
        "identical reruns produced different checkpoints");

  run_cell(cfg2, tiny_bundle(), (root / "half").string());
  run_cell(cfg4, tiny_bundle(), (root / "resumed").string(),
           (root / "half" / "checkpoint.json").string());
  check(read_file(root / "resumed" / "metrics.jsonl") == read_file(root / "a" / "metrics.jsonl"),
        "resumed run's metrics.jsonl differs from the uninterrupted run");
  check(read_file(root / "resumed" / "checkpoint.json") ==
            read_file(root / "a" / "checkpoint.json"),
        "resumed run's final checkpoint differs from the uninterrupted run");
  fs::remove_all(root);
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    void (*body)();
    double budget_seconds;  // <= 0: no pinned budget
  };
  const std::vector<Criterion> criteria = {
      {1, "schedule and ema formulas", criterion_formulas, 1.0},
      {2, "loss gradients vs finite differences", criterion_gradients, 30.0},
      {3, "metric and alignment oracles", criterion_oracles, 10.0},
      {4, "three-phase step order", criterion_phase_order, 10.0},
      {5, "table1 suite ordering", criterion_table1, 0.0},
      {6, "table2 ablations", criterion_table2, 0.0},
      {7, "reproducibility", criterion_reproducibility, 0.0},
  };

  bool all_pass = true;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    std::string failure;
    try {
      c.body();
    } catch (const std::exception& e) {
      failure = e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (failure.empty() && c.budget_seconds > 0.0 && secs >= c.budget_seconds)
      failure = "exceeded time budget of " + fmt(c.budget_seconds, 0) + "s";
    if (failure.empty()) {
      std::printf("criterion %d (%s): PASS (%.1fs)\n", c.id, c.name, secs);
    } else {
      std::printf("criterion %d (%s): FAIL (%s) (%.1fs)\n", c.id, c.name, failure.c_str(), secs);
      all_pass = false;
    }
    std::fflush(stdout);
  }
  return all_pass ? 0 : 1;
}
