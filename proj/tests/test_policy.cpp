#include <algorithm>
#include <cmath>
#include <filesystem>

#include "chunkflow/core/errors.hpp"
#include "chunkflow/policy/flow.hpp"
#include "chunkflow/policy/hybrid.hpp"
#include "chunkflow/policy/token_head.hpp"
#include "chunkflow/policy/train.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using namespace chunkflow;

namespace {

PolicyConfig tiny_config() {
  PolicyConfig c;
  c.layers = 2;
  c.hidden = 16;
  c.q_heads = 4;
  c.kv_heads = 2;
  c.cond_tokens = 2;
  c.ffn_mult = 2;
  c.chunk_size = 8;
  c.action_dim = 7;
  c.context_dim = 5;
  return c;
}

TaskSpec tiny_task() {
  TaskSpec s = TaskSpec::default_task();
  s.d = 7;
  s.chunk_size = 8;
  s.context_dim = 5;
  return s;
}

// Closed-form velocity towards a point mass at `a`.
Tensor point_mass_field(const Tensor& a, double tau, const Tensor& x) {
  Tensor v(x.shape);
  for (Index i = 0; i < x.numel(); ++i) v[i] = (a[i % a.numel()] - x[i]) / (1.0 - tau);
  return v;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

}  // namespace

TEST_CASE("PolicyConfig validation") {
  CHECK_NOTHROW(PolicyConfig{}.validate());
  PolicyConfig c;
  c.kv_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = PolicyConfig{};
  c.steps = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = PolicyConfig{};
  c.hidden = 36;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("sample_timestep examples") {
  CHECK(logistic(0.0) == 0.5);
  Rng rng(3);
  const int n = 100000;
  std::vector<double> taus(n);
  int inside = 0;
  for (double& t : taus) {
    t = sample_timestep(rng);
    REQUIRE(t > 0.0);
    REQUIRE(t < 1.0);
    inside += (t > 0.4 && t < 0.6);
  }
  std::nth_element(taus.begin(), taus.begin() + n / 2, taus.end());
  CHECK(taus[n / 2] >= 0.49);
  CHECK(taus[n / 2] <= 0.51);
  const double p = normal_cdf(std::log(1.5)) - normal_cdf(-std::log(1.5));
  CHECK(p == doctest::Approx(0.3139).epsilon(1e-3));
  const double se = std::sqrt(p * (1 - p) / n);
  CHECK(std::abs(double(inside) / n - p) < 3 * se);
}

TEST_CASE("interpolation endpoints are exact") {
  Rng rng(5);
  const Tensor a = Tensor::randn({3, 8, 7}, rng), eps = Tensor::randn({3, 8, 7}, rng);
  const NoisySample s = make_noisy(a, eps, {0.0, 1.0, 0.5});
  for (Index i = 0; i < 56; ++i) {
    CHECK(s.noisy[i] == eps[i]);
    CHECK(s.noisy[56 + i] == a[56 + i]);
    CHECK(s.noisy[112 + i] == 0.5 * eps[112 + i] + 0.5 * a[112 + i]);
  }
  for (Index i = 0; i < a.numel(); ++i) CHECK(s.target[i] == a[i] - eps[i]);
  CHECK_THROWS_AS(make_noisy(a, eps, {0.0}), DimensionError);
}

TEST_CASE("flow_matching_loss examples") {
  Rng rng(7);
  const Index T = 8, d = 7;
  const Tensor a = Tensor::randn({1, T, d}, rng);

  SUBCASE("exact target field gives zero loss") {
    const Index B = 16;
    Tensor batch({B, T, d});
    for (Index i = 0; i < batch.numel(); ++i) batch[i] = a[i % a.numel()];
    VelocityFn exact = [&](Tape& t, const std::vector<double>& tau, Var x) {
      Tensor v(x.shape());
      for (Index b = 0; b < B; ++b)
        for (Index i = 0; i < T * d; ++i)
          v[b * T * d + i] = (a[i] - x.value()[b * T * d + i]) / (1.0 - tau[std::size_t(b)]);
      return t.constant(v);
    };
    Tape t;
    CHECK(flow_matching_loss(t, exact, batch, rng).value().item() < 1e-18);
  }

  SUBCASE("zero field gives |A|^2 + T d in expectation") {
    const Index B = 20000;
    Tensor batch({B, T, d});
    for (Index i = 0; i < batch.numel(); ++i) batch[i] = a[i % a.numel()];
    VelocityFn zero = [](Tape& t, const std::vector<double>&, Var x) { return t.constant(Tensor::zeros(x.shape())); };
    Tape t;
    const double loss = flow_matching_loss(t, zero, batch, rng).value().item();
    double norm2 = 0.0, var = 0.0;
    for (Index i = 0; i < a.numel(); ++i) {
      norm2 += a[i] * a[i];
      var += 2.0 + 4.0 * a[i] * a[i];  // Var((a - e)^2) for e ~ N(0, 1)
    }
    const double expected = norm2 + double(T * d);
    CHECK(std::abs(loss - expected) < 4.0 * std::sqrt(var / double(B)));
  }

  SUBCASE("non-finite input aborts with diagnostics") {
    Tensor bad = a;
    bad[3] = std::nan("");
    VelocityFn zero = [](Tape& t, const std::vector<double>&, Var x) { return t.constant(Tensor::zeros(x.shape())); };
    Tape t;
    try {
      flow_matching_loss(t, zero, bad, rng);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("input finite: no") != std::string::npos);
    }
  }
}

TEST_CASE("euler_integrate examples") {
  Rng rng(11);
  const Tensor a = Tensor::randn({8, 7}, rng);

  SUBCASE("point-mass field lands on the target for any step count") {
    for (Index S : {1, 2, 5, 20}) {
      const Tensor x0 = Tensor::randn({3, 8, 7}, rng, 2.0);
      const Tensor out = euler_integrate([&](double tau, const Tensor& x) { return point_mass_field(a, tau, x); }, x0, S);
      double worst = 0.0;
      for (Index i = 0; i < out.numel(); ++i) worst = std::max(worst, std::abs(out[i] - a[i % a.numel()]));
      CHECK(worst < 1e-10);
    }
  }

  SUBCASE("zero field returns the starting noise") {
    const Tensor x0 = Tensor::randn({2, 8, 7}, rng);
    const Tensor out = euler_integrate([](double, const Tensor& x) { return Tensor::zeros(x.shape); }, x0, 5);
    CHECK(out.data == x0.data);
  }

  SUBCASE("left-endpoint grid reaches one exactly") {
    for (Index S : {1, 3, 5, 7, 20}) {
      std::vector<double> seen;
      euler_integrate(
          [&](double tau, const Tensor& x) {
            seen.push_back(tau);
            return Tensor::zeros(x.shape);
          },
          Tensor::zeros({1, 2}), S);
      REQUIRE(Index(seen.size()) == S);
      for (Index k = 0; k < S; ++k) CHECK(seen[std::size_t(k)] == double(k) / double(S));
      CHECK(double(S) / double(S) == 1.0);
    }
    std::vector<double> five;
    euler_integrate(
        [&](double tau, const Tensor& x) {
          five.push_back(tau);
          return Tensor::zeros(x.shape);
        },
        Tensor::zeros({1}), 5);
    CHECK(five == std::vector<double>{0.0, 0.2, 0.4, 0.6, 0.8});
  }

  CHECK_THROWS_AS(euler_integrate([](double, const Tensor& x) { return x; }, Tensor::zeros({1}), 0), ContractError);
  CHECK_THROWS_AS(euler_integrate([](double, const Tensor&) { return Tensor::zeros({2}); }, Tensor::zeros({1}), 2),
                  DimensionError);
}

TEST_CASE("euler_sample contracts on a policy") {
  Rng rng(13);
  FlowPolicy policy(tiny_config(), rng);
  const Tensor ctx = Tensor::randn({3, 5}, rng);

  SUBCASE("condition computed once per sample, one net pass per step") {
    for (Index S : {1, 5, 20}) {
      const auto enc = policy.encoder.calls, net = policy.net.calls;
      Rng r(1);
      euler_sample(policy, ctx, S, r);
      CHECK(policy.encoder.calls - enc == 1);
      CHECK(policy.net.calls - net == S);
    }
  }

  SUBCASE("same noise seed, same output") {
    Rng r1(42), r2(42);
    CHECK(euler_sample(policy, ctx, 5, r1).data == euler_sample(policy, ctx, 5, r2).data);
  }

  SUBCASE("velocity shape matches the chunk") {
    for (Index B : {1, 2, 5}) {
      const Tensor c = policy.condition(Tensor::randn({B, 5}, rng));
      for (double tau : {0.0, 0.3, 0.999}) {
        const Tensor x = Tensor::randn({B, 8, 7}, rng);
        CHECK(policy.velocity(std::vector<double>(std::size_t(B), tau), x, c).shape == x.shape);
      }
    }
    const Tensor c = policy.condition(Tensor::randn({2, 5}, rng));
    CHECK_THROWS_AS(policy.velocity({0.1, 0.2}, Tensor::randn({2, 9, 7}, rng), c), DimensionError);
    CHECK_THROWS_AS(policy.velocity({0.1}, Tensor::randn({2, 8, 7}, rng), c), DimensionError);
  }

  SUBCASE("zero output layers give a zero field") {
    for (Parameter* p : {&policy.net.out_proj.weight, &policy.net.out_proj.bias, &policy.net.skip.weight,
                         &policy.net.skip.bias})
      std::fill(p->value.data.begin(), p->value.data.end(), 0.0);
    const Tensor x0 = Tensor::randn({3, 8, 7}, rng);
    CHECK(euler_from(policy, ctx, x0, 5).data == x0.data);
  }
}

TEST_CASE("policy networks match finite differences") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Rng rng(seed);
    FlowPolicy policy(tiny_config(), rng);
    // Move off the zero-initialized skip path so every parameter has signal.
    for (Parameter* p : policy.parameters())
      for (double& v : p->value.data) v += 0.05 * rng.normal();
    const Tensor ctx = Tensor::randn({2, 5}, rng), actions = Tensor::randn({2, 8, 7}, rng);
    auto loss = [&](Tape& t) {
      Rng noise(seed + 100);
      return flow_matching_loss(t, policy.net, policy.encoder(t, t.constant(ctx)), actions, noise);
    };
    CHECK(testing::gradcheck(loss, policy.parameters(), rng).worst() < 1e-4);

    TokenHeadConfig hc;
    hc.hidden = 16;
    hc.q_heads = 4;
    hc.kv_heads = 2;
    hc.latents = 2;
    hc.depth = 3;
    hc.codebook_size = 5;
    TokenHead head(hc, rng);
    std::vector<std::vector<int>> seqs(2, std::vector<int>(6));
    for (auto& s : seqs)
      for (int& k : s) k = int(rng.index(5));
    auto ce = [&](Tape& t) { return head.loss(t, policy.encoder(t, t.constant(ctx)), seqs); };
    ParameterList params = policy.encoder_parameters();
    head.collect(params);
    CHECK(testing::gradcheck(ce, params, rng).worst() < 1e-4);
  }
}

TEST_CASE("policy checkpoint round trip") {
  Rng rng(17);
  FlowPolicy policy(tiny_config(), rng);
  const auto path = std::filesystem::temp_directory_path() / "chunkflow_policy_test.ckpt";
  policy.to_checkpoint().save(path);
  FlowPolicy back = FlowPolicy::from_checkpoint(Checkpoint::load(path));
  std::filesystem::remove(path);
  const Tensor ctx = Tensor::randn({2, 5}, rng);
  Rng r1(3), r2(3);
  CHECK(euler_sample(policy, ctx, 5, r1).data == euler_sample(back, ctx, 5, r2).data);
  Checkpoint other;
  CHECK_THROWS_AS(FlowPolicy::from_checkpoint(other), FormatError);
}

TEST_CASE("training overfits a single datapoint") {
  Rng rng(19);
  const PolicyConfig pc = tiny_config();
  FlowPolicy policy(pc, rng);
  PolicyTrainConfig tc;
  tc.lr = 1e-3;
  tc.warmup = 100;
  tc.seed = 4;
  PolicyTrainer tr(policy, tc);
  const Tensor a = Tensor::randn({1, 8, 7}, rng), ctx = Tensor::randn({1, 5}, rng);
  FlowBatch batch{Tensor({16, 8, 7}), Tensor({16, 5})};
  for (Index i = 0; i < batch.actions.numel(); ++i) batch.actions[i] = a[i % a.numel()];
  for (Index i = 0; i < batch.context.numel(); ++i) batch.context[i] = ctx[i % ctx.numel()];
  for (int s = 0; s < 2000; ++s) tr.step(batch);
  CHECK(tr.log().back().smoothed < 0.05 * 8 * 7);
  CHECK(tr.compute_macs() > 0.0);
}

TEST_CASE("divergence aborts training") {
  Rng rng(23);
  PolicyTrainConfig tc;
  tc.divergence_window = 3;
  tc.divergence_factor = 0.0;  // every loss counts as diverged
  PolicyTrainer tr(FlowPolicy(tiny_config(), rng), tc);
  FlowBatch batch{Tensor::randn({2, 8, 7}, rng), Tensor::randn({2, 5}, rng)};
  tr.step(batch);
  tr.step(batch);
  CHECK_THROWS_AS(tr.step(batch), NumericError);
}

TEST_CASE("loss smoothing") {
  LossSmoother s(0.99);
  CHECK(s.push(3.0) == doctest::Approx(3.0));
  CHECK(s.push(1.0) == doctest::Approx((0.99 * 0.01 * 3.0 + 0.01 * 1.0) / (1 - 0.99 * 0.99)));
  LossSmoother flat(0.99);
  for (int i = 0; i < 100; ++i) CHECK(flat.push(2.5) == doctest::Approx(2.5));
}

TEST_CASE("resume from a checkpoint matches an uninterrupted run") {
  const Dataset data = generate_dataset(tiny_task(), 64);
  Rng rng(29);
  const FlowPolicy init(tiny_config(), rng);
  PolicyTrainConfig tc;
  tc.steps = 20;
  tc.batch = 4;
  tc.warmup = 5;
  tc.seed = 8;

  PolicyTrainer full(init, tc);
  full.run(data.chunks, data.stats);

  PolicyTrainConfig half = tc;
  half.steps = 10;
  PolicyTrainer first(init, half);
  first.run(data.chunks, data.stats);
  const auto path = std::filesystem::temp_directory_path() / "chunkflow_resume_test.ckpt";
  first.to_checkpoint().save(path);
  PolicyTrainer resumed = PolicyTrainer::from_checkpoint(Checkpoint::load(path));
  std::filesystem::remove(path);
  resumed.set_total_steps(20);
  resumed.run(data.chunks, data.stats);

  REQUIRE(resumed.log().size() == full.log().size());
  for (std::size_t i = 0; i < full.log().size(); ++i) {
    INFO("step ", i);
    CHECK(resumed.log()[i].loss == full.log()[i].loss);
    CHECK(resumed.log()[i].smoothed == full.log()[i].smoothed);
  }
  const ParameterList pa = full.policy().parameters(), pb = resumed.policy().parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value.data == pb[i]->value.data);
  CHECK(resumed.compute_macs() == full.compute_macs());
}

TEST_CASE("loss CSV round trip") {
  const std::vector<LossRecord> log{{1, 3.5, 3.5}, {2, 1.25, 2.0}};
  const auto path = std::filesystem::temp_directory_path() / "chunkflow_loss_test.csv";
  write_loss_csv(log, path);
  const auto back = read_loss_csv(path);
  std::filesystem::remove(path);
  REQUIRE(back.size() == 2);
  CHECK(back[1].step == 2);
  CHECK(back[1].loss == 1.25);
  CHECK(back[1].smoothed == 2.0);
}

TEST_CASE("token head") {
  Rng rng(31);
  TokenHeadConfig hc;
  hc.hidden = 16;
  hc.q_heads = 4;
  hc.kv_heads = 2;
  hc.layers = 2;
  hc.latents = 3;
  hc.depth = 2;
  hc.codebook_size = 7;
  TokenHead head(hc, rng);
  for (Parameter* p : [&] {
         ParameterList l;
         head.collect(l);
         return l;
       }())
    for (double& v : p->value.data) v += 0.3 * rng.normal();
  const Tensor cond = Tensor::randn({4, 3, 16}, rng);

  SUBCASE("cached decoding equals full recomputation") {
    const auto a = head.generate(cond), b = head.generate_uncached(cond);
    CHECK(a == b);
    for (const auto& s : a) CHECK(Index(s.size()) == hc.sequence_length());
  }

  SUBCASE("logits at a position ignore later tokens") {
    std::vector<std::vector<int>> s1{{1, 2, 3, 4, 5, 6}}, s2{{1, 2, 3, 0, 0, 0}};
    Tensor c1({1, 3, 16}, std::vector<double>(cond.data.begin(), cond.data.begin() + 48));
    Tape t1, t2;
    const Tensor l1 = head.logits(t1, t1.constant(c1), s1).value(), l2 = head.logits(t2, t2.constant(c1), s2).value();
    for (Index i = 0; i < 4 * 7; ++i) CHECK(l1[i] == l2[i]);
    bool changed = false;
    for (Index i = 4 * 7; i < 6 * 7; ++i) changed |= l1[i] != l2[i];
    CHECK(changed);
  }

  SUBCASE("input validation") {
    Tape t;
    Var c = t.constant(cond);
    CHECK_THROWS_AS(head.loss(t, c, std::vector<std::vector<int>>(4, std::vector<int>(5, 0))), DimensionError);
    CHECK_THROWS_AS(head.loss(t, c, std::vector<std::vector<int>>(4, std::vector<int>(6, 7))), FormatError);
    CHECK_THROWS_AS(head.loss(t, c, std::vector<std::vector<int>>(3, std::vector<int>(6, 0))), DimensionError);
  }
}

TEST_CASE("scratch arm is deterministic") {
  const Dataset data = generate_dataset(tiny_task(), 32);
  Rng rng(37);
  const FlowPolicy init(tiny_config(), rng);
  PolicyTrainConfig tc;
  tc.batch = 4;
  tc.seed = 2;
  const ArmResult a = train_scratch(init, data, tc, 1e7), b = train_scratch(init, data, tc, 1e7);
  REQUIRE(a.flow_log.size() == b.flow_log.size());
  CHECK(a.flow_log.size() > 1);
  for (std::size_t i = 0; i < a.flow_log.size(); ++i) CHECK(a.flow_log[i].smoothed == b.flow_log[i].smoothed);
  CHECK(a.compute_macs >= 1e7);
}
