#include <doctest.h>

#include <cmath>
#include <functional>
#include <string>

#include "mole/autodiff.hpp"
#include "mole/grad_check.hpp"
#include "oracles.hpp"

using namespace mole;

namespace {

struct OpCase {
  std::string name;
  std::vector<std::pair<std::string, Shape>> params;
  std::function<Var(const ParamBinder&, Tape&)> body;
};

// Projects the op output onto a fixed random tensor so every output element
// contributes to the scalar loss.
void check_op(const OpCase& c, std::uint64_t seed) {
  ParamStore store;
  std::uint64_t s = seed;
  for (const auto& [id, shape] : c.params) store.add(id, oracle::random(shape, ++s));
  const LossFn f = [&](Tape& tape, ParamStore& st) {
    const ParamBinder bind = trainable_binder(tape, st);
    Var out = c.body(bind, tape);
    return ad::dot_const(out, oracle::random(out.shape(), 999));
  };
  const GradCheckReport r = grad_check(f, store);
  INFO(c.name << " worst " << r.worst_param << "[" << r.worst_index << "] rel " << r.max_rel_error);
  CHECK(r.max_rel_error < 1e-4);
  CHECK(r.coords_checked > 0);
}

Tensor rnd(Shape s, std::uint64_t seed) { return oracle::random(std::move(s), seed); }

}  // namespace

TEST_CASE("every differentiable op matches central differences") {
  const std::vector<OpCase> cases = {
      {"add", {{"a", {3, 4}}, {"b", {3, 4}}}, [](auto& p, Tape&) { return ad::add(p("a"), p("b")); }},
      {"sub3", {{"a", {2, 3, 4}}, {"b", {2, 3, 4}}}, [](auto& p, Tape&) { return ad::sub(p("a"), p("b")); }},
      {"mul", {{"a", {3, 4}}, {"b", {3, 4}}}, [](auto& p, Tape&) { return ad::mul(p("a"), p("b")); }},
      {"scale", {{"a", {5}}}, [](auto& p, Tape&) { return ad::scale(p("a"), -2.5); }},
      {"add_bias", {{"a", {2, 3, 4}}, {"b", {4}}}, [](auto& p, Tape&) { return ad::add_bias(p("a"), p("b")); }},
      {"matmul2", {{"a", {3, 4}}, {"b", {4, 5}}}, [](auto& p, Tape&) { return ad::matmul(p("a"), p("b")); }},
      {"matmul3", {{"a", {2, 3, 4}}, {"b", {4, 2}}}, [](auto& p, Tape&) { return ad::matmul(p("a"), p("b")); }},
      {"reshape", {{"a", {2, 6}}}, [](auto& p, Tape&) { return ad::reshape(p("a"), {3, 4}); }},
      {"gelu", {{"a", {4, 5}}}, [](auto& p, Tape&) { return ad::gelu(p("a")); }},
      {"softmax", {{"a", {3, 5}}}, [](auto& p, Tape&) { return ad::softmax(p("a")); }},
      {"softmax3", {{"a", {2, 3, 4}}}, [](auto& p, Tape&) { return ad::softmax(p("a")); }},
      {"layer_norm", {{"x", {3, 6}}, {"g", {6}}, {"b", {6}}},
       [](auto& p, Tape&) { return ad::layer_norm(p("x"), p("g"), p("b")); }},
      {"attention2", {{"q", {2, 3}}, {"k", {4, 3}}, {"v", {4, 3}}},
       [](auto& p, Tape&) { return ad::attention(p("q"), p("k"), p("v")); }},
      {"attention3", {{"q", {2, 1, 3}}, {"k", {2, 4, 3}}, {"v", {2, 4, 3}}},
       [](auto& p, Tape&) { return ad::attention(p("q"), p("k"), p("v")); }},
      {"gather_rows", {{"a", {4, 3}}}, [](auto& p, Tape&) { return ad::gather_rows(p("a"), {3, 0, 3, 1}); }},
      {"scatter_add_rows", {{"base", {4, 2}}, {"s0", {2, 2}}, {"s1", {3, 2}}},
       [](auto& p, Tape&) {
         return ad::scatter_add_rows(p("base"), {p("s0"), p("s1")}, {{1, 3}, {0, 3, 2}});
       }},
      {"gather_elements", {{"a", {3, 4}}}, [](auto& p, Tape&) { return ad::gather_elements(p("a"), {0, 5, 5, 11}); }},
      {"scale_rows", {{"a", {3, 4}}, {"w", {3}}}, [](auto& p, Tape&) { return ad::scale_rows(p("a"), p("w")); }},
      {"mean_rows", {{"a", {2, 3, 4}}}, [](auto& p, Tape&) { return ad::mean_rows(p("a")); }},
      {"mean_middle", {{"a", {2, 3, 4}}}, [](auto& p, Tape&) { return ad::mean_middle(p("a")); }},
      {"sum", {{"a", {3, 3}}}, [](auto& p, Tape&) { return ad::sum(p("a")); }},
      {"mean", {{"a", {3, 3}}}, [](auto& p, Tape&) { return ad::mean(p("a")); }},
      {"mse", {{"a", {2, 3, 2}}}, [](auto& p, Tape&) { return ad::mse(p("a"), rnd({2, 3, 2}, 5)); }},
      {"linear_combination", {{"a", {2}}, {"b", {3}}},
       [](auto& p, Tape&) {
         const Var xs[] = {ad::sum(p("a")), ad::mean(ad::mul(p("b"), p("b")))};
         const double cs[] = {0.3, -1.7};
         return ad::linear_combination(xs, cs);
       }},
      {"ortho_loss", {{"y0", {3, 4}}, {"y1", {3, 4}}, {"y2", {3, 4}}},
       [](auto& p, Tape&) {
         const Var ys[] = {p("y0"), p("y1"), p("y2")};
         return ad::ortho_loss(ys);
       }},
  };
  std::uint64_t seed = 1;
  for (const auto& c : cases) {
    SUBCASE(c.name.c_str()) { check_op(c, seed); }
    seed += 100;
  }
}

TEST_CASE("grad_check on w^T w reports near-exact agreement") {
  ParamStore store;
  store.add("w", oracle::random({6}, 3));
  const LossFn f = [](Tape& tape, ParamStore& st) {
    Var w = tape.param(st, "w");
    return ad::sum(ad::mul(w, w));
  };
  const auto r = grad_check(f, store);
  CHECK(r.max_rel_error < 1e-6);
  for (std::size_t i = 0; i < 6; ++i) CHECK(store.grad("w")[i] == doctest::Approx(2 * store.value("w")[i]));
}

TEST_CASE("frozen parameters get exactly zero gradient") {
  ParamStore store;
  store.add("w", oracle::random({3, 3}, 1));
  store.add("frozen", oracle::random({3, 3}, 2), true);
  const LossFn f = [](Tape& tape, ParamStore& st) {
    const auto bind = trainable_binder(tape, st);
    return ad::sum(ad::matmul(bind("w"), bind("frozen")));
  };
  const auto r = grad_check(f, store);
  CHECK(r.passed);
  CHECK(r.frozen_grad_max == 0.0);
  for (double g : store.grad("frozen").data()) CHECK(g == 0.0);
}

TEST_CASE("grad_check rejects bad step sizes and non-finite losses") {
  ParamStore store;
  store.add("w", Tensor({1}, 1.0));
  const LossFn ok = [](Tape& t, ParamStore& s) { return ad::sum(t.param(s, "w")); };
  GradCheckOptions o;
  o.eps = 1e-2;
  CHECK_THROWS_AS(grad_check(ok, store, o), std::invalid_argument);
  o.eps = 1e-8;
  CHECK_THROWS_AS(grad_check(ok, store, o), std::invalid_argument);
  const LossFn bad = [](Tape& t, ParamStore& s) {
    return ad::scale(ad::sum(t.param(s, "w")), std::numeric_limits<double>::infinity());
  };
  CHECK_THROWS_AS(grad_check(bad, store), std::domain_error);
}

TEST_CASE("a tape is single-use and needs a scalar loss") {
  ParamStore store;
  store.add("w", Tensor({2}, 1.0));
  Tape tape;
  Var w = tape.param(store, "w");
  CHECK_THROWS(tape.backward(w));
  Var loss = ad::sum(w);
  tape.backward(loss);
  CHECK_THROWS(tape.backward(loss));
}

TEST_CASE("gradients accumulate into the store across tapes") {
  ParamStore store;
  store.add("w", Tensor({2}, 1.0));
  for (int i = 0; i < 2; ++i) {
    Tape tape;
    tape.backward(ad::sum(tape.param(store, "w")));
  }
  CHECK(store.grad("w")[0] == 2.0);
  store.zero_grad();
  CHECK(store.grad("w")[0] == 0.0);
}

TEST_CASE("param store contract") {
  ParamStore store;
  store.add("a", Tensor({2, 3}));
  CHECK(store.grad("a").shape() == store.value("a").shape());
  CHECK_THROWS(store.add("a", Tensor({1})));
  CHECK_THROWS(store.get("missing"));
  store.add("b", Tensor({1}), true);
  CHECK(store.trainable_count() == 6);
  CHECK(store.ids() == std::vector<std::string>{"a", "b"});
}
