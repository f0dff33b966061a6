#include <cmath>
#include <filesystem>

#include "chunkflow/core/errors.hpp"
#include "chunkflow/distill/distill.hpp"
#include "doctest.h"

using namespace chunkflow;

namespace {

PolicyConfig tiny_config() {
  PolicyConfig c;
  c.layers = 2;
  c.hidden = 16;
  c.q_heads = 4;
  c.kv_heads = 2;
  c.ffn_mult = 2;
  c.chunk_size = 8;
  c.action_dim = 7;
  c.context_dim = 5;
  return c;
}

bool same_parameters(FlowPolicy& a, FlowPolicy& b) {
  const ParameterList pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i]->value.data != pb[i]->value.data) return false;
  return true;
}

}  // namespace

TEST_CASE("teacher_generate examples") {
  Rng rng(1);
  FlowPolicy policy(tiny_config(), rng);
  const Tensor ctx = Tensor::randn({3, 5}, rng);

  SUBCASE("agrees bitwise with euler_sample for the same noise") {
    Rng r1(9), r2(9);
    const Tensor x0 = Tensor::randn({3, 8, 7}, r1);
    CHECK(teacher_generate(policy, ctx, x0, 5).data == euler_sample(policy, ctx, 5, r2).data);
  }

  SUBCASE("zero field returns the noise") {
    for (Parameter* p : {&policy.net.out_proj.weight, &policy.net.out_proj.bias})
      std::fill(p->value.data.begin(), p->value.data.end(), 0.0);
    const Tensor x0 = Tensor::randn({3, 8, 7}, rng);
    CHECK(teacher_generate(policy, ctx, x0, 5).data == x0.data);
  }

  SUBCASE("point-mass field maps every start to the target") {
    const Tensor a = Tensor::randn({8, 7}, rng);
    for (Index S : {1, 5}) {
      const Tensor x0 = Tensor::randn({4, 8, 7}, rng, 3.0);
      const Tensor out = euler_integrate(
          [&](double tau, const Tensor& x) {
            Tensor v(x.shape);
            for (Index i = 0; i < x.numel(); ++i) v[i] = (a[i % a.numel()] - x[i]) / (1.0 - tau);
            return v;
          },
          x0, S);
      for (Index i = 0; i < out.numel(); ++i) CHECK(std::abs(out[i] - a[i % a.numel()]) < 1e-10);
    }
  }
}

TEST_CASE("distill_step examples") {
  Rng rng(3);
  FlowPolicy teacher(tiny_config(), rng);
  const Tensor ctx = Tensor::randn({4, 5}, rng);

  SUBCASE("student starts as a copy of the teacher") {
    DistillConfig dc;
    Distiller d(teacher, dc);
    CHECK(same_parameters(d.student(), teacher));
  }

  SUBCASE("one-step teacher equal to the student gives zero loss") {
    DistillConfig dc;
    dc.teacher_steps = 1;
    Distiller d(teacher, dc);
    CHECK(d.step(ctx).loss == 0.0);
  }

  SUBCASE("teacher gradients stay exactly zero") {
    DistillConfig dc;
    // The teacher shares nothing with the student; a second handle lets us inspect it.
    FlowPolicy frozen = teacher;
    for (Parameter* p : frozen.parameters()) p->grad = Tensor::zeros(p->value.shape);
    Distiller d(
        [&frozen](const Tensor& c, const Tensor& x0) { return teacher_generate(frozen, c, x0, 5); }, teacher, dc);
    for (int i = 0; i < 3; ++i) d.step(ctx);
    CHECK(global_grad_norm(frozen.parameters()) == 0.0);
    CHECK(same_parameters(frozen, teacher));
    CHECK_FALSE(same_parameters(d.student(), teacher));
  }

  SUBCASE("encoder stays frozen") {
    DistillConfig dc;
    Distiller d(teacher, dc);
    for (int i = 0; i < 3; ++i) d.step(ctx);
    const ParameterList a = d.student().encoder_parameters(), b = teacher.encoder_parameters();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->value.data == b[i]->value.data);
  }

  SUBCASE("non-finite teacher output skips the batch") {
    DistillConfig dc;
    Distiller d([](const Tensor&, const Tensor& x0) { return Tensor(x0.shape, std::nan("")); }, teacher, dc);
    const DistillRecord r = d.step(ctx);
    CHECK(r.skipped);
    CHECK(same_parameters(d.student(), teacher));
    CHECK(d.steps_done() == 1);
  }

  SUBCASE("targets are recomputed for fresh noise each step") {
    DistillConfig dc;
    int calls = 0;
    Tensor last;
    Distiller d(
        [&](const Tensor& c, const Tensor& x0) {
          ++calls;
          CHECK(last.data != x0.data);
          last = x0;
          return teacher_generate(teacher, c, x0, 5);
        },
        teacher, dc);
    for (int i = 0; i < 4; ++i) d.step(ctx);
    CHECK(calls == 4);
  }

  SUBCASE("point-mass teacher is learned by the one-pass student") {
    const Tensor a = Tensor::randn({8, 7}, rng);
    DistillConfig dc;
    dc.lr = 2e-2;
    dc.cosine = true;
    dc.warmup = 100;
    dc.steps = 1500;
    dc.batch = 16;
    Distiller d(
        [&a](const Tensor&, const Tensor& x0) {
          Tensor o(x0.shape);
          for (Index i = 0; i < o.numel(); ++i) o[i] = a[i % a.numel()];
          return o;
        },
        teacher, dc);
    const double first = d.step(Tensor::randn({16, 5}, rng)).loss;
    while (d.steps_done() < dc.steps) d.step(Tensor::randn({16, 5}, rng));
    CHECK(d.log().back().loss < 1e-3 * first);
  }
}

TEST_CASE("latency bench") {
  Rng rng(5);
  PolicyConfig pc = tiny_config();
  FlowPolicy flow(pc, rng);
  FlowPolicy distilled = flow;
  RvqConfig rc;
  rc.chunk_size = 8;
  rc.action_dim = 7;
  rc.latents = 2;
  rc.latent_dim = 4;
  rc.depth = 2;
  rc.codebook_size = 8;
  rc.hidden = 8;
  RvqModel tokenizer(rc, rng);
  TokenHeadConfig hc;
  hc.hidden = 16;
  hc.q_heads = 4;
  hc.kv_heads = 2;
  hc.latents = 2;
  hc.depth = 2;
  hc.codebook_size = 8;
  TokenHead head(hc, rng);
  const Tensor ctx = Tensor::randn({4, 5}, rng);

  const auto rows = latency_bench(standard_variants(flow, distilled, head, tokenizer), ctx, 10, 2);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].variant == "ar_token_head");
  CHECK(rows[0].passes_per_chunk == 4);
  CHECK(rows[1].passes_per_chunk == 5);
  CHECK(rows[2].passes_per_chunk == 1);
  for (const auto& r : rows) CHECK(r.chunks_per_s == doctest::Approx(1000.0 / r.median_ms));

  const auto path = std::filesystem::temp_directory_path() / "chunkflow_bench_test.csv";
  write_latency_csv(rows, path);
  const auto back = read_latency_csv(path);
  std::filesystem::remove(path);
  REQUIRE(back.size() == 3);
  CHECK(back[2].variant == "distilled_s1");
  CHECK(back[1].passes_per_chunk == 5);

  hc.hidden = 8;
  hc.q_heads = 2;
  hc.kv_heads = 1;
  TokenHead narrow(hc, rng);
  CHECK_THROWS_AS(standard_variants(flow, distilled, narrow, tokenizer), ConfigError);
}
