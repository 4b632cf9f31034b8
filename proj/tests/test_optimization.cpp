#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "sdt/checkpoint.hpp"
#include "sdt/error.hpp"
#include "sdt/optimizer.hpp"
#include "sdt/schedule.hpp"

using namespace sdt;

namespace {

// The closed form, evaluated in long double straight from its definition.
long double closed_form(std::size_t d, std::size_t w, std::uint64_t step, long double scale, long double floor_lr) {
  const long double s = step;
  const long double lr = scale / std::sqrt(static_cast<long double>(d)) *
                         std::min(s * std::pow(static_cast<long double>(w), -1.5L), 1.0L / std::sqrt(s));
  return step <= w ? std::max(lr, floor_lr) : lr;
}

long double scale_for(std::size_t d, std::size_t w, double peak) {
  return peak * std::sqrt(static_cast<long double>(d)) * std::sqrt(static_cast<long double>(w));
}

double rel(double a, long double b) { return static_cast<double>(std::abs(a - b) / std::abs(b)); }

template <typename F>
ErrorCode error_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::kContract;
}

ModelConfig small_model(std::size_t layers) {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 12;
  c.enc_layers = layers;
  c.vocab_size = 10;
  return c;
}

}  // namespace

TEST_CASE("warmup closed form, unscaled") {
  ScheduleConfig c;
  c.peak_lr.reset();
  const LearningRateSchedule s(c);
  CHECK(s.scale() == 1.0);
  CHECK(s.warmup_lr(8000) == doctest::Approx(4.941e-4).epsilon(1e-3));
  CHECK(rel(s.warmup_lr(8000), 1.0L / std::sqrt(512.0L * 8000.0L)) < 1e-12);
  CHECK(s.warmup_lr(4000) == doctest::Approx(s.warmup_lr(8000) / 2).epsilon(1e-14));
}

TEST_CASE("explicit peak rescales the formula") {
  const LearningRateSchedule s(ScheduleConfig{});
  CHECK(s.warmup_lr(8000) == 2e-3);
  CHECK(s.peak() == 2e-3);
  CHECK(s.warmup_lr(1) >= 1e-7);
  CHECK(s.warmup_lr(1) == doctest::Approx(2e-3 / 8000));
}

TEST_CASE("the floor binds at the start of a long ramp") {
  ScheduleConfig c;
  c.warmup_steps = 100000;
  c.peak_lr = 1e-3;
  c.floor_lr = 1e-7;
  const LearningRateSchedule s(c);
  CHECK(s.warmup_lr(1) == 1e-7);  // formula gives 1e-8
  CHECK(s.warmup_lr(200) == doctest::Approx(2e-6));
}

TEST_CASE("schedule matches the closed forms at 10,000 random steps") {
  std::mt19937_64 g(2024);
  for (const bool explicit_peak : {false, true}) {
    ScheduleConfig c;
    c.d_model = 512;
    c.warmup_steps = 8000;
    if (!explicit_peak) c.peak_lr.reset();
    const LearningRateSchedule s(c);
    const long double scale = explicit_peak ? scale_for(512, 8000, 2e-3) : 1.0L;
    double worst = 0.0, worst_restart = 0.0;
    std::uniform_int_distribution<std::uint64_t> step(1, 400000);
    for (int i = 0; i < 10000; ++i) {
      const std::uint64_t k = step(g);
      worst = std::max(worst, rel(s.warmup_lr(k), closed_form(512, 8000, k, scale, c.floor_lr)));
      // A restarted stage runs the decay branch from the peak step onwards.
      worst_restart = std::max(worst_restart, rel(s.restart_lr(k), closed_form(512, 8000, 8000 + k - 1, scale, 0)));
    }
    CHECK(worst < 1e-12);
    CHECK(worst_restart < 1e-12);
  }
}

TEST_CASE("warmup meets the decay continuously at the peak") {
  const LearningRateSchedule s(ScheduleConfig{});
  const double at = s.warmup_lr(8000), before = s.warmup_lr(7999), after = s.warmup_lr(8001);
  CHECK(at == s.peak());
  CHECK(before < at);
  CHECK(after < at);
  CHECK(at - before == doctest::Approx(s.peak() / 8000).epsilon(1e-9));
  CHECK(at - after < at - before);
}

TEST_CASE("restart examples") {
  const LearningRateSchedule s(ScheduleConfig{});
  CHECK(s.restart_lr(1) == s.peak());
  CHECK(s.restart_lr(3 * 8000 + 1) == doctest::Approx(s.peak() / 2).epsilon(1e-14));
  double prev = s.restart_lr(1);
  for (std::uint64_t k = 2; k < 20000; ++k) {
    const double lr = s.restart_lr(k);
    CHECK_MESSAGE(lr <= prev, k);
    prev = lr;
  }
}

TEST_CASE("stage schedule picks restart or the continuing global decay") {
  const LearningRateSchedule s(ScheduleConfig{});
  StageSchedule plan{{{6, 10000}, {12, 10000}, {18, 10000}}, 1, true};
  plan.validate();
  CHECK(plan.total_steps() == 30000);
  CHECK(plan.learning_rate(s, 0, 500, 500) == s.warmup_lr(500));
  CHECK(plan.learning_rate(s, 1, 1, 10001) == s.peak());
  CHECK(plan.learning_rate(s, 2, 7, 20007) == s.restart_lr(7));
  CHECK(error_of([&] { plan.restart_lr(s, 0, 1); }) == ErrorCode::kContract);
  CHECK(plan.restart_lr(s, 1, 1) == s.peak());

  plan.reset_lr = false;
  CHECK(plan.learning_rate(s, 1, 1, 10001) == s.warmup_lr(10001));
  CHECK(plan.learning_rate(s, 1, 1, 10001) < s.peak());

  plan.reset_lr = true;
  plan.omega = 2;
  CHECK(plan.learning_rate(s, 1, 1, 10001) == s.warmup_lr(10001));
  CHECK(plan.learning_rate(s, 2, 1, 20001) == s.peak());
}

TEST_CASE("schedule errors") {
  const LearningRateSchedule s(ScheduleConfig{});
  CHECK(error_of([&] { s.warmup_lr(0); }) == ErrorCode::kContract);
  CHECK(error_of([] { StageSchedule{{{6, 10}, {6, 10}}, 1, true}.validate(); }) == ErrorCode::kPlan);
  CHECK(error_of([] { StageSchedule{{{4, 10}, {9, 10}}, 1, true}.validate(); }) == ErrorCode::kPlan);
  CHECK(error_of([] { StageSchedule{{{4, 0}}, 1, true}.validate(); }) == ErrorCode::kPlan);
  CHECK(error_of([] { StageSchedule{{{4, 10}}, 0, true}.validate(); }) == ErrorCode::kPlan);
  CHECK(error_of([] { StageSchedule{{}, 1, true}.validate(); }) == ErrorCode::kPlan);
  ScheduleConfig bad;
  bad.warmup_steps = 0;
  CHECK(error_of([&] { LearningRateSchedule{bad}; }) == ErrorCode::kConfig);
  bad = ScheduleConfig{};
  bad.peak_lr = 1e-8;
  CHECK(error_of([&] { LearningRateSchedule{bad}; }) == ErrorCode::kConfig);
}

TEST_CASE("Adam first step on a scalar moves by about lr") {
  Adam adam(OptimizerConfig{});
  Tensor x = Tensor::from_values({1}, {0.5f}, true);
  x.grad()[0] = 1.0f;
  adam.step({{"x", x}}, 0.01);
  CHECK(x[0] == doctest::Approx(0.5 - 0.01 / (1.0 + 1e-8)).epsilon(1e-7));
  CHECK(adam.step_count() == 1);
  const auto& m = adam.moments().at("x");
  CHECK(m.m[0] == doctest::Approx(0.1));
  CHECK(m.v[0] == doctest::Approx(0.003));
}

TEST_CASE("Adam second step follows the bias-corrected recursion") {
  const OptimizerConfig c;
  Adam adam(c);
  Tensor x = Tensor::from_values({2}, {1.0f, -1.0f}, true);
  const double g1[2] = {0.3, -2.0}, g2[2] = {-0.1, 0.5};
  double ref[2] = {1.0, -1.0}, m[2] = {0, 0}, v[2] = {0, 0};
  for (int t = 1; t <= 2; ++t) {
    const double* g = t == 1 ? g1 : g2;
    for (int i = 0; i < 2; ++i) {
      x.grad()[i] = static_cast<float>(g[i]);
      m[i] = c.beta1 * m[i] + (1 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1 - c.beta2) * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(c.beta1, t)), vh = v[i] / (1 - std::pow(c.beta2, t));
      ref[i] -= 0.05 * mh / (std::sqrt(vh) + c.eps);
    }
    adam.step({{"x", x}}, 0.05);
  }
  CHECK(x[0] == doctest::Approx(ref[0]).epsilon(1e-6));
  CHECK(x[1] == doctest::Approx(ref[1]).epsilon(1e-6));
}

TEST_CASE("Adam fixed points") {
  Adam adam(OptimizerConfig{});
  std::mt19937_64 g(4);
  std::normal_distribution<float> n;
  Tensor a = Tensor::zeros({3, 3}, true), b = Tensor::zeros({4}, true);
  for (auto& v : a.values()) v = n(g);
  for (auto& v : b.values()) v = n(g);
  const auto a0 = a.clone(), b0 = b.clone();
  for (int step = 0; step < 20; ++step) {
    for (auto& v : a.grad()) v = n(g);
    b.zero_grad();
    adam.step({{"a", a}, {"b", b}}, 0.0);
  }
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == a0[i]);
  for (int step = 0; step < 20; ++step) {
    b.zero_grad();
    adam.step({{"b", b}}, 0.1);
  }
  for (std::size_t i = 0; i < b.numel(); ++i) CHECK(b[i] == b0[i]);
}

TEST_CASE("Adam rejects non-finite gradients and names the parameter") {
  Adam adam(OptimizerConfig{});
  Tensor x = Tensor::zeros({2}, true);
  x.grad()[1] = std::numeric_limits<float>::quiet_NaN();
  try {
    adam.step({{"encoder.layer3.ffn.fc1.weight", x}}, 0.1);
    FAIL("no error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kNumeric);
    CHECK(std::string(e.what()).find("encoder.layer3.ffn.fc1.weight") != std::string::npos);
  }
}

TEST_CASE("Adam trajectories are deterministic") {
  auto run = [] {
    Adam adam(OptimizerConfig{});
    Tensor x = Tensor::filled({5}, 0.25f, true);
    for (int t = 0; t < 30; ++t) {
      for (std::size_t i = 0; i < 5; ++i) x.grad()[i] = std::sin(0.3f * static_cast<float>(t + i)) + x[i];
      adam.step({{"x", x}}, 0.01);
    }
    return std::vector<float>(x.values().begin(), x.values().end());
  };
  CHECK(run() == run());
}

TEST_CASE("Adam reset and retain") {
  Adam adam(OptimizerConfig{});
  Tensor a = Tensor::zeros({2}, true), b = Tensor::zeros({2}, true);
  a.grad()[0] = 1;
  b.grad()[0] = 1;
  adam.step({{"a", a}, {"b", b}}, 0.1);
  adam.retain({{"a", a}});
  CHECK(adam.moments().count("a") == 1);
  CHECK(adam.moments().count("b") == 0);
  CHECK(adam.step_count() == 1);
  adam.reset();
  CHECK(adam.moments().empty());
  CHECK(adam.step_count() == 0);
}

TEST_CASE("gradient accumulation") {
  SUBCASE("every_n = 1 triggers on each push and leaves grads alone") {
    GradientAccumulator acc(1);
    Tensor x = Tensor::zeros({1}, true);
    x.grad()[0] = 3.0f;
    CHECK(acc.push());
    acc.finalize({{"x", x}});
    CHECK(x.grad()[0] == 3.0f);
  }
  SUBCASE("g then -g cancels to a zero update") {
    GradientAccumulator acc(2);
    Adam adam(OptimizerConfig{});
    Tensor x = Tensor::filled({3}, 0.7f, true);
    const float g[3] = {0.4f, -1.5f, 2.0f};
    for (int i = 0; i < 3; ++i) x.grad()[i] = g[i];
    CHECK_FALSE(acc.push());
    for (int i = 0; i < 3; ++i) x.grad()[i] += -g[i];
    CHECK(acc.push());
    acc.finalize({{"x", x}});
    adam.step({{"x", x}}, 0.1);
    for (int i = 0; i < 3; ++i) CHECK(x[i] == 0.7f);
  }
  SUBCASE("two half batches equal one concatenated batch") {
    Model m(small_model(2), 3);
    const std::vector<std::vector<TokenId>> src{{4, 5, 6}, {6, 7, 8}, {9, 4, 5}, {8, 8, 4}};
    const std::vector<std::vector<TokenId>> tin{{1, 4, 5, 6}, {1, 6, 7, 8}, {1, 9, 4, 5}, {1, 8, 8, 4}};
    const std::vector<std::vector<TokenId>> tout{{4, 5, 6, 2}, {6, 7, 8, 2}, {9, 4, 5, 2}, {8, 8, 4, 2}};
    auto accumulate = [&](std::size_t from, std::size_t to) {
      const std::vector<std::vector<TokenId>> s(src.begin() + from, src.begin() + to),
          ti(tin.begin() + from, tin.begin() + to);
      std::vector<TokenId> gold;
      for (std::size_t i = from; i < to; ++i) gold.insert(gold.end(), tout[i].begin(), tout[i].end());
      TapeF tape;
      TapeScope<float> scope(tape);
      ForwardContext ctx;
      const auto enc = m.encode(TokenBatch::from_sequences(s), ctx);
      const auto loss = label_smoothed_nll(m.decode_forward(TokenBatch::from_sequences(ti), enc, ctx),
                                           std::span<const TokenId>(gold), 0.1, kPadId);
      tape.backward(loss);
    };
    const auto params = m.parameters();
    m.zero_grad();
    accumulate(0, 4);
    std::vector<std::vector<float>> full;
    for (const auto& [name, t] : params) full.emplace_back(t.grad().begin(), t.grad().end());
    m.zero_grad();
    GradientAccumulator acc(2);
    accumulate(0, 2);
    CHECK_FALSE(acc.push());
    accumulate(2, 4);
    CHECK(acc.push());
    ParameterList list(params.begin(), params.end());
    acc.finalize(list);
    double worst = 0;
    for (std::size_t p = 0; p < params.size(); ++p)
      for (std::size_t i = 0; i < full[p].size(); ++i)
        worst = std::max(worst, static_cast<double>(std::abs(params[p].second.grad()[i] - full[p][i])));
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("checkpoint averaging") {
  const nlohmann::json run = {{"seed", 1}};
  Model a(small_model(2), 1), b(small_model(2), 2), c(small_model(2), 3);
  const auto ba = make_bundle(a, run, TrainingState{10, 0, 1, 0, 0, {}});
  const auto bb = make_bundle(b, run, TrainingState{20, 0, 1, 0, 0, {}});
  const auto bc = make_bundle(c, run, TrainingState{30, 1, 1, 0, 0, {}});

  SUBCASE("identical inputs are returned unchanged") {
    const auto avg = average_checkpoints({ba, ba, ba, ba, ba});
    REQUIRE(avg.tensors.size() == ba.tensors.size());
    for (std::size_t t = 0; t < ba.tensors.size(); ++t)
      for (std::size_t i = 0; i < ba.tensors[t].tensor.numel(); ++i)
        CHECK(avg.tensors[t].tensor[i] == ba.tensors[t].tensor[i]);
  }
  SUBCASE("two inputs average element-wise") {
    const auto avg = average_checkpoints({ba, bb});
    for (std::size_t t = 0; t < ba.tensors.size(); ++t)
      for (std::size_t i = 0; i < ba.tensors[t].tensor.numel(); ++i)
        CHECK(avg.tensors[t].tensor[i] ==
              doctest::Approx((ba.tensors[t].tensor[i] + bb.tensors[t].tensor[i]) / 2.0).epsilon(1e-6));
    CHECK(avg.state.global_step == 20);
    CHECK(avg.state.moments.empty());
  }
  SUBCASE("every ordering gives the same bytes") {
    std::vector<CheckpointBundle> order{ba, bb, bc};
    const auto want = average_checkpoints(order).serialize();
    std::vector<int> idx{0, 1, 2};
    while (std::next_permutation(idx.begin(), idx.end())) {
      std::vector<CheckpointBundle> perm;
      for (int i : idx) perm.push_back(order[static_cast<std::size_t>(i)]);
      CHECK(average_checkpoints(perm).serialize() == want);
    }
  }
  SUBCASE("mismatched tensors are named in the error") {
    Model deeper(small_model(3), 1);
    try {
      average_checkpoints({ba, make_bundle(deeper, run)});
      FAIL("no error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kIncompatibleCheckpoint);
      CHECK(std::string(e.what()).find("encoder.layer3") != std::string::npos);
    }
    auto wide = small_model(2);
    wide.d_ff = 16;
    try {
      average_checkpoints({ba, make_bundle(Model(wide, 1), run)});
      FAIL("no error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kIncompatibleCheckpoint);
      CHECK(std::string(e.what()).find("ffn.fc1.weight") != std::string::npos);
    }
  }
}
