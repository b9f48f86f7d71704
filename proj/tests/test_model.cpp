#include "doctest.h"

#include "lsttm/model.hpp"
#include "toy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

using namespace lsttm;
using ad::Array;
using ad::Index;
using ad::Var;

namespace {

Array random_array(std::mt19937_64& rng, Index rows, Index cols, double scale = 1.0) {
  return uniform_array(rng, rows, cols, scale);
}

double leaky(double x, double slope = 0.2) { return x > 0 ? x : slope * x; }

// Dense single-center GAT, written directly against Eigen.
struct DenseGat {
  Array wc, wn, a;
  Array attention(const Array& center, const Array& nbrs) const {
    const Index d = wc.rows();
    const Array hc = wc * center.transpose();
    Array e(nbrs.rows(), 1);
    for (Index j = 0; j < nbrs.rows(); ++j) {
      const Array hn = wn * nbrs.row(j).transpose();
      e(j, 0) = leaky((a.topRows(d).transpose() * hc)(0, 0) + (a.bottomRows(d).transpose() * hn)(0, 0));
    }
    const double m = e.maxCoeff();
    Array w = (e.array() - m).exp().matrix();
    return w / w.sum();
  }
  Array layer(const Array& center, const Array& nbrs) const {
    if (nbrs.rows() == 0) return center;
    const Array alpha = attention(center, nbrs);
    Array agg = Array::Zero(wc.rows(), 1);
    for (Index j = 0; j < nbrs.rows(); ++j) agg += alpha(j, 0) * (wn * nbrs.row(j).transpose());
    Array out = agg.transpose();
    for (Index i = 0; i < out.size(); ++i) out.data()[i] = leaky(out.data()[i]);
    return out;
  }
};

DenseGat dense(const ParamSet& ps, const std::string& prefix) {
  return {ps.at(prefix + "/w_center"), ps.at(prefix + "/w_neighbor"), ps.at(prefix + "/attention")};
}

GatWeights weights_of(const DenseGat& g) { return {ad::constant(g.wc), ad::constant(g.wn), ad::constant(g.a)}; }

std::vector<Var> constants(const ParamSet& ps) {
  std::vector<Var> out;
  for (const auto& v : ps.values) out.push_back(ad::constant(v));
  return out;
}

ad::IndexList zeros(std::size_t n) { return ad::make_indices(std::vector<Index>(n, 0)); }

}  // namespace

TEST_CASE("node_input") {
  const Model model(toy::model_config());
  ParamSet ps = model.init_params(1);
  const std::vector<NodeId> ids{0, 1, 2, 3};

  SUBCASE("all-zero tables give zeros") {
    for (int f = 0; f < kFieldCount; ++f) ps.at("short/user_field_" + std::to_string(f)).setZero();
    CHECK(model.node_input(constants(ps), Side::kUser, ids).value().isZero());
  }
  SUBCASE("identity-like projection passes one field through") {
    for (int f = 1; f < kFieldCount; ++f) ps.at("short/user_field_" + std::to_string(f)).setZero();
    Array proj = Array::Zero(4, 24);
    proj.leftCols(4) = Array::Identity(4, 4);
    ps.at("short/user_proj") = proj;
    const Array out = model.node_input(constants(ps), Side::kUser, ids).value();
    const LogHeader h = toy::header();
    for (NodeId u : ids) {
      CHECK(out.row(u) == ps.at("short/user_field_0").row(user_fields(h, u)[0]));
    }
  }
  SUBCASE("matches a dense oracle") {
    const Array out = model.node_input(constants(ps), Side::kItem, {4, 0, 2}).value();
    const LogHeader h = toy::header();
    int row = 0;
    for (NodeId d : {4, 0, 2}) {
      Array x(1, 24);
      const Fields f = item_fields(h, d);
      for (int k = 0; k < kFieldCount; ++k) {
        x.block(0, 4 * k, 1, 4) = ps.at("short/item_field_" + std::to_string(k)).row(f[static_cast<std::size_t>(k)]);
      }
      const Array expected = x * ps.at("short/item_proj").transpose();
      CHECK((out.row(row) - expected).cwiseAbs().maxCoeff() <= 1e-12);
      ++row;
    }
  }
  SUBCASE("out-of-vocabulary ids are rejected") {
    CHECK_THROWS_AS(model.node_input(constants(ps), Side::kUser, {4}), std::out_of_range);
  }
}

TEST_CASE("gat_attention") {
  std::mt19937_64 rng(2);
  const DenseGat g{random_array(rng, 4, 4), random_array(rng, 4, 4), random_array(rng, 8, 1)};
  const Var center = ad::constant(random_array(rng, 1, 4));

  SUBCASE("single neighbor gets weight one") {
    const Var a = gat_attention(center, ad::constant(random_array(rng, 1, 4)), zeros(1), weights_of(g), 0.2);
    CHECK(a.value()(0, 0) == 1.0);
  }
  SUBCASE("identical neighbors share weight evenly") {
    const Array row = random_array(rng, 1, 4);
    const Array nbrs = row.replicate(4, 1);
    const Var a = gat_attention(center, ad::constant(nbrs), zeros(4), weights_of(g), 0.2);
    for (Index j = 0; j < 4; ++j) CHECK(a.value()(j, 0) == doctest::Approx(0.25).epsilon(1e-15));
  }
  SUBCASE("random cases match a softmax-of-logits oracle") {
    for (int trial = 0; trial < 50; ++trial) {
      const Array c = random_array(rng, 1, 4, 2.0);
      const Array nbrs = random_array(rng, 1 + trial % 7, 4, 2.0);
      const Array got = gat_attention(ad::constant(c), ad::constant(nbrs), zeros(static_cast<std::size_t>(nbrs.rows())),
                                      weights_of(g), 0.2)
                            .value();
      const Array want = g.attention(c, nbrs);
      CHECK((got - want).cwiseAbs().maxCoeff() <= 1e-10);
      CHECK(std::abs(got.sum() - 1.0) <= 1e-10);
      CHECK(got.minCoeff() > 0.0);
    }
  }
  SUBCASE("empty neighbor list is the caller's problem") {
    CHECK_THROWS(gat_attention(center, ad::constant(Array(0, 4)), zeros(0), weights_of(g), 0.2));
  }
}

TEST_CASE("gat_layer") {
  std::mt19937_64 rng(3);
  DenseGat g{random_array(rng, 4, 4), random_array(rng, 4, 4), random_array(rng, 8, 1)};

  SUBCASE("empty neighbor set returns the center") {
    const Array c = random_array(rng, 1, 4);
    CHECK(gat_layer(ad::constant(c), ad::constant(Array(0, 4)), zeros(0), weights_of(g), 0.2).value() == c);
  }
  SUBCASE("single neighbor with identity weights passes it through") {
    g.wn = Array::Identity(4, 4);
    Array x(1, 4);
    x << 0.3, 1.2, 0.5, 2.0;
    const Array out = gat_layer(ad::constant(random_array(rng, 1, 4)), ad::constant(x), zeros(1), weights_of(g), 0.2)
                          .value();
    CHECK(out == x);
  }
  SUBCASE("batched layer matches the dense oracle per center, including cold centers") {
    for (int trial = 0; trial < 20; ++trial) {
      const Index m = 1 + trial % 5;
      const Array centers = random_array(rng, m, 4, 2.0);
      std::vector<Index> seg;
      std::vector<Array> per_center(static_cast<std::size_t>(m));
      std::uniform_int_distribution<int> count(0, 4);
      std::vector<Array> rows;
      for (Index c = 0; c < m; ++c) {
        const int n = count(rng);
        Array nb(n, 4);
        for (int j = 0; j < n; ++j) {
          nb.row(j) = random_array(rng, 1, 4, 2.0);
          seg.push_back(c);
          rows.push_back(nb.row(j));
        }
        per_center[static_cast<std::size_t>(c)] = nb;
      }
      Array all(static_cast<Index>(rows.size()), 4);
      for (std::size_t r = 0; r < rows.size(); ++r) all.row(static_cast<Index>(r)) = rows[r];
      const Array got =
          gat_layer(ad::constant(centers), ad::constant(all), ad::make_indices(seg), weights_of(g), 0.2).value();
      for (Index c = 0; c < m; ++c) {
        const Array want = g.layer(centers.row(c), per_center[static_cast<std::size_t>(c)]);
        CHECK((got.row(c) - want).cwiseAbs().maxCoeff() <= 1e-12);
      }
    }
  }
  SUBCASE("neighbor order does not matter") {
    const Array center = random_array(rng, 1, 4);
    const Array nbrs = random_array(rng, 6, 4);
    std::vector<Index> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    const Array base = gat_layer(ad::constant(center), ad::constant(nbrs), zeros(6), weights_of(g), 0.2).value();
    for (int trial = 0; trial < 10; ++trial) {
      std::shuffle(perm.begin(), perm.end(), rng);
      Array shuffled(6, 4);
      for (Index j = 0; j < 6; ++j) shuffled.row(j) = nbrs.row(perm[static_cast<std::size_t>(j)]);
      const Array out = gat_layer(ad::constant(center), ad::constant(shuffled), zeros(6), weights_of(g), 0.2).value();
      CHECK((out - base).cwiseAbs().maxCoeff() <= 1e-12);
    }
  }
}

TEST_CASE("encode_short_term") {
  const auto evs = toy::events();
  const auto gs = toy::graphs(evs);
  const Model model(toy::model_config());

  SUBCASE("user without clicks falls back to its input") {
    ParamSet ps = model.init_params(5);
    const auto p = constants(ps);
    const auto snap = gs.short_graph.snapshot(-1);
    const Array out = model.short_term(p, snap, {0, 2}).value();
    CHECK(out == model.node_input(p, Side::kUser, {0, 2}).value());
  }
  SUBCASE("one edge with identity weights composes two rectifiers") {
    InteractionGraph g(GraphKind::kShortTerm);
    g.append(toy::event(1, 2, 10, true));
    ParamSet ps = model.init_params(6);
    for (const char* layer : {"short/user_l1", "short/item_l1", "short/user_l2"}) {
      ps.at(std::string(layer) + "/w_neighbor") = Array::Identity(4, 4);
    }
    const auto p = constants(ps);
    const Array u0 = model.node_input(p, Side::kUser, {1}).value();
    Array want = u0;
    for (Index i = 0; i < want.size(); ++i) want.data()[i] = leaky(leaky(want.data()[i]));
    const Array got = model.short_term(p, g.full(), {1}).value();
    CHECK((got - want).cwiseAbs().maxCoeff() <= 1e-15);
  }
  SUBCASE("matches a recursive dense oracle on the toy graph") {
    const ParamSet ps = model.init_params(7);
    const auto p = constants(ps);
    const auto snap = gs.short_graph.snapshot(2 * 3600 - 1);
    const Array users_in = model.node_input(p, Side::kUser, {0, 1, 2, 3}).value();
    const Array items_in = model.node_input(p, Side::kItem, {0, 1, 2, 3, 4}).value();
    const DenseGat ul1 = dense(ps, "short/user_l1"), il1 = dense(ps, "short/item_l1"), ul2 = dense(ps, "short/user_l2");
    auto stack = [](const std::vector<Array>& rows) {
      Array out(static_cast<Index>(rows.size()), 4);
      for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = rows[i];
      return out;
    };
    auto item1 = [&](NodeId d) {
      std::vector<Array> nb;
      for (NodeId u : snap.temporal_neighbors({Side::kItem, d}, 3)) nb.push_back(users_in.row(u));
      return il1.layer(items_in.row(d), stack(nb));
    };
    const Array got = model.short_term(p, snap, {0, 1, 2, 3}).value();
    for (NodeId u = 0; u < 4; ++u) {
      std::vector<Array> nb0, nb1;
      for (NodeId d : snap.temporal_neighbors({Side::kUser, u}, 3)) {
        nb0.push_back(items_in.row(d));
        nb1.push_back(item1(d));
      }
      const Array u1 = ul1.layer(users_in.row(u), stack(nb0));
      const Array want = ul2.layer(u1, stack(nb1));
      CHECK((got.row(u) - want).cwiseAbs().maxCoeff() <= 1e-12);
    }
  }
}

TEST_CASE("encode_long_term") {
  const auto evs = toy::events();
  const auto gs = toy::graphs(evs);
  const Model model(toy::model_config());
  const ParamSet ps = model.init_params(8);
  const auto p = constants(ps);
  const auto snap = gs.long_graph.full();

  SUBCASE("isolated user keeps its id embedding") {
    InteractionGraph empty(GraphKind::kLongTerm);
    const Array out = model.long_term(p, empty.full(), Side::kUser, {2}, 1).value();
    CHECK(out == ps.at("long/user_id").row(2));
  }
  SUBCASE("same seed, same output") {
    CHECK(model.long_term(p, snap, Side::kUser, {0, 1, 2, 3}, 9).value() ==
          model.long_term(p, snap, Side::kUser, {0, 1, 2, 3}, 9).value());
  }
  SUBCASE("matches recursive recomputation with the sampled neighbors") {
    const std::uint64_t seed = 13;
    const Array& uid = ps.at("long/user_id");
    const Array& iid = ps.at("long/item_id");
    std::function<Array(NodeRef, int)> rep = [&](NodeRef n, int layer) -> Array {
      if (layer == 0) return n.side == Side::kUser ? Array(uid.row(n.id)) : Array(iid.row(n.id));
      const auto nbrs = snap.uniform_neighbors(n, 3, seed);
      Array rows(static_cast<Index>(nbrs.size()), 4);
      for (std::size_t j = 0; j < nbrs.size(); ++j) {
        rows.row(static_cast<Index>(j)) = rep({other_side(n.side), nbrs[j]}, layer - 1);
      }
      const std::string side = n.side == Side::kUser ? "user" : "item";
      const DenseGat g = dense(ps, "long/" + side + "_l" + std::to_string(layer));
      return g.layer(rep(n, layer - 1), rows);
    };
    const Array users = model.long_term(p, snap, Side::kUser, {0, 1, 2, 3}, seed).value();
    for (NodeId u = 0; u < 4; ++u) CHECK((users.row(u) - rep({Side::kUser, u}, 2)).cwiseAbs().maxCoeff() <= 1e-12);
    const Array items = model.long_term(p, snap, Side::kItem, {0, 3, 5, 6}, seed).value();
    int row = 0;
    for (NodeId d : {0, 3, 5, 6}) {
      CHECK((items.row(row++) - rep({Side::kItem, d}, 2)).cwiseAbs().maxCoeff() <= 1e-12);
    }
    const std::vector<NodeRef> mixed{{Side::kItem, 6}, {Side::kUser, 2}, {Side::kItem, 6}};
    const Array m = model.long_term_nodes(p, snap, mixed, seed).value();
    CHECK((m.row(0) - rep({Side::kItem, 6}, 2)).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK((m.row(1) - rep({Side::kUser, 2}, 2)).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK(m.row(2) == m.row(0));
  }
}

TEST_CASE("gate_fuse") {
  std::mt19937_64 rng(4);
  const Var us = ad::constant(random_array(rng, 3, 4));
  const Var ul = ad::constant(random_array(rng, 3, 4));
  const Var d = ad::constant(random_array(rng, 3, 4));

  SUBCASE("equal logits give the midpoint") {
    const Var zero = ad::constant(Array::Zero(8, 1));
    const GateResult r = gate_fuse(us, ul, d, zero, zero);
    CHECK((r.weights.value().array() == 0.5).all());
    CHECK((r.fused.value() - 0.5 * (us.value() + ul.value())).cwiseAbs().maxCoeff() <= 1e-15);
  }
  SUBCASE("a dominant short logit saturates the weights") {
    Array gs = Array::Zero(8, 1);
    Array item = Array::Constant(3, 4, 0.5);
    gs.bottomRows(4).setConstant(20.0);
    const GateResult r = gate_fuse(us, ul, ad::constant(item), ad::constant(gs), ad::constant(Array::Zero(8, 1)));
    const double expected = 1.0 / (1.0 + std::exp(-40.0));
    for (Index i = 0; i < 3; ++i) {
      CHECK(r.weights.value()(i, 0) == doctest::Approx(expected).epsilon(1e-15));
      CHECK(r.weights.value()(i, 1) == doctest::Approx(1.0 - expected).epsilon(1e-9));
    }
  }
  SUBCASE("weights form a distribution") {
    for (int trial = 0; trial < 50; ++trial) {
      const GateResult r = gate_fuse(us, ul, d, ad::constant(random_array(rng, 8, 1, 5.0)),
                                     ad::constant(random_array(rng, 8, 1, 5.0)));
      for (Index i = 0; i < 3; ++i) {
        CHECK(std::abs(r.weights.value().row(i).sum() - 1.0) <= 1e-10);
        CHECK(r.weights.value().row(i).minCoeff() > 0.0);
      }
    }
  }
}

TEST_CASE("deepfm_score") {
  std::mt19937_64 rng(5);
  auto zero_tower = [] {
    DeepFmWeights w;
    w.tower_w = {ad::constant(Array::Zero(6, 16)), ad::constant(Array::Zero(4, 6)), ad::constant(Array::Zero(1, 4))};
    w.tower_b = {ad::constant(Array::Zero(1, 6)), ad::constant(Array::Zero(1, 4)), ad::constant(Array::Zero(1, 1))};
    return w;
  };

  SUBCASE("all-zero parameters score one half") {
    const std::vector<Var> fields(4, ad::constant(Array::Zero(2, 4)));
    const Var logit = deepfm_logit(fields, ad::constant(Array::Zero(2, 1)), zero_tower(), 0.2);
    CHECK((ad::sigmoid(logit).value().array() == 0.5).all());
  }
  SUBCASE("pairwise term is the dot product of the fields") {
    Array e = Array::Zero(1, 4);
    e(0, 0) = 1.0;
    const std::vector<Var> fields{ad::constant(e), ad::constant(e), ad::constant(Array::Zero(1, 4)),
                                  ad::constant(Array::Zero(1, 4))};
    CHECK(deepfm_logit(fields, ad::constant(Array::Zero(1, 1)), zero_tower(), 0.2).item() == 1.0);
  }
  SUBCASE("matches an independent FM + tower oracle") {
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<Array> f;
      for (int i = 0; i < 4; ++i) f.push_back(random_array(rng, 3, 4));
      const Array first = random_array(rng, 3, 1);
      const Array w1 = random_array(rng, 6, 16), b1 = random_array(rng, 1, 6);
      const Array w2 = random_array(rng, 4, 6), b2 = random_array(rng, 1, 4);
      const Array w3 = random_array(rng, 1, 4), b3 = random_array(rng, 1, 1);
      DeepFmWeights w;
      w.tower_w = {ad::constant(w1), ad::constant(w2), ad::constant(w3)};
      w.tower_b = {ad::constant(b1), ad::constant(b2), ad::constant(b3)};
      std::vector<Var> fv;
      for (const auto& a : f) fv.push_back(ad::constant(a));
      const Array got = deepfm_logit(fv, ad::constant(first), w, 0.2).value();
      for (Index r = 0; r < 3; ++r) {
        double fm = 0.0;
        for (int i = 0; i < 4; ++i) {
          for (int j = i + 1; j < 4; ++j) fm += f[static_cast<std::size_t>(i)].row(r).dot(f[static_cast<std::size_t>(j)].row(r));
        }
        Eigen::VectorXd x(16);
        for (int i = 0; i < 4; ++i) x.segment(4 * i, 4) = f[static_cast<std::size_t>(i)].row(r).transpose();
        Eigen::VectorXd h1 = w1 * x + b1.transpose();
        for (auto& v : h1) v = leaky(v);
        Eigen::VectorXd h2 = w2 * h1 + b2.transpose();
        for (auto& v : h2) v = leaky(v);
        const double deep = (w3 * h2)(0) + b3(0, 0);
        CHECK(std::abs(got(r, 0) - (first(r, 0) + fm + deep)) <= 1e-10);
      }
    }
  }
}

TEST_CASE("ce_loss") {
  Array p(2, 1);
  p << 0.5, 0.5;
  CHECK(ce_loss(ad::constant(p), {1, 0}).item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  p << 1.0 - 1e-12, 1e-12;
  CHECK(ce_loss(ad::constant(p), {1, 0}).item() < 1e-11);

  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  std::bernoulli_distribution coin(0.4);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 1 + trial;
    Array q(n, 1);
    std::vector<double> y;
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
      q(i, 0) = u(rng);
      y.push_back(coin(rng) ? 1.0 : 0.0);
      sum += y.back() == 1.0 ? std::log(q(i, 0)) : std::log(1.0 - q(i, 0));
    }
    CHECK(ce_loss(ad::constant(q), y).item() == doctest::Approx(-sum / n).epsilon(1e-13));
  }
  p << 1.0, 0.5;
  CHECK_THROWS_AS(ce_loss(ad::constant(p), {1, 0}), std::domain_error);
  CHECK_THROWS(ce_loss(ad::constant(p), {1}));
}

TEST_CASE("neighbor_similarity_loss") {
  auto two_node_plan = [] {
    PathSet ps;
    ps.length = 2;
    ps.paths.push_back({{Side::kUser, 0}, {Side::kItem, 0}});
    return plan_pairs(ps, 0, {}, 1);
  };
  SUBCASE("orthogonal pair") {
    Array r = Array::Zero(2, 4);
    r(0, 0) = 1.0;
    r(1, 1) = 1.0;
    CHECK(neighbor_similarity_loss(two_node_plan(), ad::constant(r)).item() == doctest::Approx(std::log(2.0)));
  }
  SUBCASE("unit dot product") {
    Array r = Array::Zero(2, 4);
    r(0, 0) = 1.0;
    r(1, 0) = 1.0;
    const double got = neighbor_similarity_loss(two_node_plan(), ad::constant(r)).item();
    CHECK(got == doctest::Approx(std::log1p(std::exp(-1.0))).epsilon(1e-14));
    CHECK(std::abs(got - 0.313262) < 1e-6);
  }
  SUBCASE("without negatives the loss is the plain path sum") {
    std::mt19937_64 rng(7);
    const Array r = random_array(rng, 2, 4);
    const double dotv = r.row(0).dot(r.row(1));
    CHECK(neighbor_similarity_loss(two_node_plan(), ad::constant(r)).item() ==
          -std::log(1.0 / (1.0 + std::exp(-dotv))));
  }
  SUBCASE("pair plan counts distinct-node pairs and negatives") {
    PathSet ps;
    ps.length = 4;
    ps.paths.push_back({{Side::kUser, 0}, {Side::kItem, 1}, {Side::kUser, 0}, {Side::kItem, 2}});
    const std::vector<NodeRef> pool{{Side::kItem, 9}};
    const PairPlan plan = plan_pairs(ps, 2, pool, 3);
    CHECK(plan.pair_count == 5);  // 6 pairs minus the repeated user
    CHECK(plan.neg_a.size() == 10);
    for (Index b : plan.neg_b) CHECK(plan.nodes[static_cast<std::size_t>(b)] == NodeRef{Side::kItem, 9});
  }
}

TEST_CASE("end-to-end gradients on the toy graph") {
  const auto evs = toy::events();
  const auto gs = toy::graphs(evs);
  const auto batch = toy::batch_for_hour(evs, 2);
  REQUIRE(batch.size() >= 5);
  const auto short_snap = gs.short_graph.snapshot(2 * 3600 - 1);
  const auto long_snap = gs.long_graph.snapshot(2 * 3600 - 1);

  for (Variant variant : {Variant::kFull, Variant::kNoGating, Variant::kNoGatLn}) {
    CAPTURE(variant_name(variant));
    const Model model(toy::model_config(variant));
    const ParamSet ps = model.init_params(11);

    {  // task loss w.r.t. short-term and fusion parameters
      std::vector<int> idx = ps.indices(ParamGroup::kShort);
      const auto fusion = ps.indices(ParamGroup::kFusion);
      idx.insert(idx.end(), fusion.begin(), fusion.end());
      std::vector<Array> point;
      for (int i : idx) point.push_back(ps.values[static_cast<std::size_t>(i)]);
      const LongTermInput lt{nullptr, &long_snap, 5};
      const auto f = [&](std::span<const Var> v) {
        std::vector<Var> p = constants(ps);
        for (std::size_t k = 0; k < idx.size(); ++k) p[static_cast<std::size_t>(idx[k])] = v[k];
        return model.task_loss(p, batch, short_snap, lt);
      };
      const auto res = ad::grad_check(f, point);
      MESSAGE("L_T grad check max relative error: " << res.max_relative_error);
      CHECK(res.max_relative_error <= 1e-4);
    }
    {  // neighbor-similarity loss w.r.t. long-term parameters
      const auto idx = ps.indices(ParamGroup::kLong);
      std::vector<Array> point;
      for (int i : idx) point.push_back(ps.values[static_cast<std::size_t>(i)]);
      const PathSet paths = long_snap.deepwalk_paths(1, 5, 3);
      std::vector<NodeRef> pool;
      for (NodeId u : long_snap.active_nodes(Side::kUser)) pool.push_back({Side::kUser, u});
      for (NodeId d : long_snap.active_nodes(Side::kItem)) pool.push_back({Side::kItem, d});
      const PairPlan plan = plan_pairs(paths, 2, pool, 4);
      const auto f = [&](std::span<const Var> v) {
        std::vector<Var> p = constants(ps);
        for (std::size_t k = 0; k < idx.size(); ++k) p[static_cast<std::size_t>(idx[k])] = v[k];
        return neighbor_similarity_loss(plan, model.long_term_nodes(p, long_snap, plan.nodes, 6));
      };
      const auto res = ad::grad_check(f, point);
      MESSAGE("L_N grad check max relative error: " << res.max_relative_error);
      CHECK(res.max_relative_error <= 1e-4);
    }
  }
}

TEST_CASE("score is monotone in the first-order bias") {
  const auto evs = toy::events();
  const auto gs = toy::graphs(evs);
  const auto batch = toy::batch_for_hour(evs, 2);
  const Model model(toy::model_config());
  ParamSet ps = model.init_params(12);
  const auto snap = gs.short_graph.snapshot(2 * 3600 - 1);
  const auto long_snap = gs.long_graph.full();
  const LongTermInput lt{nullptr, &long_snap, 1};
  Array previous = model.predict(constants(ps), batch, snap, lt).value();
  for (int step = 0; step < 5; ++step) {
    ps.at("fusion/bias")(0, 0) += 0.25;
    const Array next = model.predict(constants(ps), batch, snap, lt).value();
    CHECK((next.array() > previous.array()).all());
    CHECK((next.array() > 0.0).all());
    CHECK((next.array() < 1.0).all());
    previous = next;
  }
}

TEST_CASE("a saturated gate cuts the long-term branch off exactly") {
  const auto evs = toy::events();
  const auto gs = toy::graphs(evs);
  const auto batch = toy::batch_for_hour(evs, 2);
  const Model model(toy::model_config());
  ParamSet ps = model.init_params(13);
  ps.at("fusion/item_id").setConstant(0.1);
  Array gate = Array::Zero(8, 1);
  gate.bottomRows(4).setConstant(1e4);
  ps.at("fusion/gate_short") = gate;
  ps.at("fusion/gate_long").setZero();

  const auto snap = gs.short_graph.snapshot(2 * 3600 - 1);
  const auto long_snap = gs.long_graph.full();
  const LongTermInput lt{nullptr, &long_snap, 2};
  const auto vars = make_vars(ps, {ParamGroup::kShort, ParamGroup::kFusion, ParamGroup::kLong});
  const Var loss = model.task_loss(vars, batch, snap, lt);
  const auto grads = ad::grad(loss, vars);
  for (int i : ps.indices(ParamGroup::kLong)) CHECK(grads[static_cast<std::size_t>(i)].value().isZero(0.0));

  ParamSet moved = ps;
  for (int i : moved.indices(ParamGroup::kLong)) moved.values[static_cast<std::size_t>(i)].array() += 0.3;
  CHECK(model.predict(constants(moved), batch, snap, lt).value() == model.predict(constants(ps), batch, snap, lt).value());
}

TEST_CASE("parameter layout") {
  const Model full(toy::model_config());
  const Model no_gating(toy::model_config(Variant::kNoGating));
  const ParamSet ps = full.init_params(1);
  CHECK(ps == full.init_params(1));
  CHECK_FALSE(ps == full.init_params(2));
  CHECK_NOTHROW(full.check_layout(ps));
  CHECK_THROWS(no_gating.check_layout(ps));
  CHECK(ps.at("fusion/bias")(0, 0) == 0.0);
  CHECK(ps.at("long/user_id").cwiseAbs().maxCoeff() <= 0.5);
  CHECK(ps.at("short/user_l1/w_center").rows() == 4);
  CHECK(parse_variant("no-gat-ln") == Variant::kNoGatLn);
  CHECK_THROWS(parse_variant("nope"));
}
