// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include "attncalc/eval.hpp"
#include "attncalc/grad.hpp"
#include "attncalc/serialize.hpp"
#include "attncalc/canonical.hpp"
#include "oracles.hpp"

using namespace attncalc;

namespace {
const DimSym S = DimSym::seq("s");
const DimSym D = DimSym::fixed("d");
const Shape SD{S, D};

TensorValue rnd(std::vector<int64_t> shape, uint64_t seed, const std::string& stream,
                double lo = -1.0, double hi = 1.0) {
    CounterRng r(seed, stream);
    TensorValue t(std::move(shape));
    for (auto& v : t.data) v = r.next_uniform(lo, hi);
    return t;
}
}  // namespace

TEST_CASE("identity diagram returns its input exactly") {
    Diagram d = identity({SD});
    Binding b{{"s", 3}, {"d", 4}};
    TensorValue x = rnd({3, 4}, 1, "x");
    auto out = eval(d, b, {}, {x});
    REQUIRE(out[0].data == x.data);
}

TEST_CASE("softmax values") {
    Diagram d = box_diagram(softmax_box(Shape{DimSym::of(3)}));
    auto out = eval(d, {}, {}, {TensorValue({3}, {0, 0, 0})});
    for (double v : out[0].data) REQUIRE(v == Catch::Approx(1.0 / 3.0).epsilon(1e-12));

    Diagram d2 = box_diagram(softmax_box(Shape{DimSym::of(2)}));
    auto out2 = eval(d2, {}, {}, {TensorValue({2}, {0, std::log(3.0)})});
    REQUIRE(out2[0].data[0] == Catch::Approx(0.25).epsilon(1e-12));
    REQUIRE(out2[0].data[1] == Catch::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one") {
    Shape sq{S.with_role("q"), S.with_role("k")};
    Diagram d = box_diagram(scaled_softmax_box(sq, D));
    Binding b{{"s", 7}, {"d", 4}};
    TensorValue x = rnd({7, 7}, 2, "sm", -5, 5);
    auto out = eval(d, b, {}, {x});
    for (int64_t i = 0; i < 7; ++i) {
        double row = 0;
        for (int64_t j = 0; j < 7; ++j) row += out[0].at({i, j});
        REQUIRE(std::abs(row - 1.0) < 1e-12);
    }
}

TEST_CASE("layer norm on a two-element row") {
    // mean 1.5, var 0.25 -> (v - 1.5) / sqrt(0.25 + 1e-5)
    Diagram d = box_diagram(layer_norm_box(Shape{DimSym::of(2)}));
    TensorValue v({2}, {1, 2}), g({2}, {1, 1}), be({2}, {0, 0});
    auto out = eval(d, {}, {}, {v, g, be});
    REQUIRE(out[0].data[0] == Catch::Approx(-0.5 / std::sqrt(0.25 + 1e-5)).epsilon(1e-9));
    REQUIRE(out[0].data[1] == Catch::Approx(0.5 / std::sqrt(0.25 + 1e-5)).epsilon(1e-9));
}

TEST_CASE("positional encoding at position zero") {
    Diagram d = box_diagram(pos_enc_box(S, D));
    Binding b{{"s", 3}, {"d", 6}};
    auto out = eval(d, b, {}, {});
    for (int64_t k1 = 1; k1 <= 6; ++k1) {
        double v = out[0].at({0, k1 - 1});
        if (k1 % 2 == 1)
            REQUIRE(v == Catch::Approx(1.0));  // cos 0
        else
            REQUIRE(v == Catch::Approx(0.0).margin(1e-15));  // sin 0
    }
}

TEST_CASE("phi is ELU plus one") {
    Diagram d = box_diagram(elementwise("phi", Shape{DimSym::of(3)}));
    auto out = eval(d, {}, {}, {TensorValue({3}, {0, 2, -1})});
    REQUIRE(out[0].data[0] == Catch::Approx(1.0));
    REQUIRE(out[0].data[1] == Catch::Approx(3.0));
    REQUIRE(out[0].data[2] == Catch::Approx(std::exp(-1.0)).epsilon(1e-12));
}

TEST_CASE("contraction specialises to the dot product") {
    Shape a{DimSym::fixed("a")};
    Diagram d = box_diagram(contract_box(a, a));
    Binding b{{"a", 3}};
    auto out = eval(d, b, {}, {TensorValue({3}, {1, 2, 3}), TensorValue({3}, {4, 5, 6})});
    REQUIRE(out[0].data[0] == Catch::Approx(32.0));  // 4 + 10 + 18
}

TEST_CASE("contraction with an identity matrix is the identity") {
    Shape id2{DimSym::of(2), DimSym::of(2)};
    Shape m{DimSym::of(2), DimSym::fixed("c")};
    Diagram d = box_diagram(contract_box(id2, m, 1, 0));
    Binding b{{"c", 3}};
    TensorValue eye({2, 2}, {1, 0, 0, 1});
    TensorValue M = rnd({2, 3}, 3, "m");
    auto out = eval(d, b, {}, {eye, M});
    REQUIRE(rel_err(out[0], M) < 1e-15);
}

TEST_CASE("simd without residual equals stitched independent evaluations") {
    Diagram body = box_diagram(elementwise("exp", Shape{D}));
    Diagram lifted = make_simd(body, S);
    Binding b{{"s", 5}, {"d", 3}};
    TensorValue x = rnd({5, 3}, 4, "simd");
    auto out = eval(lifted, b, {}, {x});
    for (int64_t i = 0; i < 5; ++i) {
        auto lane = eval(body, b, {}, {x.slice0(i)});
        for (int64_t j = 0; j < 3; ++j) REQUIRE(out[0].at({i, j}) == lane[0].at({j}));
    }
}

TEST_CASE("simd with residual is a left fold") {
    // cell: (h, x) -> (h + x, h + x) built from explicit boxes
    Shape H{DimSym::fixed("h")};
    Builder bld;
    Val h = bld.input(H);
    Val x = bld.input(H);
    Val sum = bld.add1(add_box(H, H), {h, x});
    auto [c1, c2] = bld.copy(sum);
    bld.output(c1);
    bld.output(c2);
    Diagram cell = bld.finish();

    Diagram rnn = make_simd(cell, S, H);
    Binding b{{"s", 6}, {"h", 3}};
    TensorValue h0 = rnd({3}, 5, "h0");
    TensorValue xs = rnd({6, 3}, 5, "xs");
    auto out = eval(rnn, b, {}, {h0, xs});

    auto [hN, ys] = oracle::fold_left(h0, xs, [](const TensorValue& h, const TensorValue& x) {
        TensorValue s = h;
        for (size_t i = 0; i < s.data.size(); ++i) s.data[i] += x.data[i];
        return std::pair<TensorValue, TensorValue>(s, s);
    });
    REQUIRE(out[0].data == hN.data);
    REQUIRE(out[1].data == ys.data);
}

TEST_CASE("ua instantiation is reproducible and stream-separated") {
    Box ua = learnable_box("u0", {SD}, {SD});
    Binding b{{"s", 4}, {"d", 8}};
    auto e1 = instantiate_ua_entry<double>(ua, b, 7);
    auto e2 = instantiate_ua_entry<double>(ua, b, 7);
    REQUIRE(e1.mlp.layers[0].W.data == e2.mlp.layers[0].W.data);
    REQUIRE(e1.mlp.layers[0].W.shape == std::vector<int64_t>{8, 8});  // hidden = innermost input dim

    Box ua2 = learnable_box("u1", {SD}, {SD});
    auto e3 = instantiate_ua_entry<double>(ua2, b, 7);
    REQUIRE(e1.mlp.layers[0].W.data != e3.mlp.layers[0].W.data);
}

TEST_CASE("gradient of the identity is the cotangent") {
    Diagram d = identity({SD});
    Binding b{{"s", 2}, {"d", 3}};
    TensorValue x = rnd({2, 3}, 6, "x"), g = rnd({2, 3}, 6, "g");
    auto res = grad(d, b, {}, {x}, {g});
    REQUIRE(res.input_grads[0].data == g.data);
}

TEST_CASE("softmax jacobian at the uniform point") {
    // at s([0,0,0]) = 1/3: J = (I - J_ones/3)/3
    Diagram d = box_diagram(softmax_box(Shape{DimSym::of(3)}));
    TensorValue x({3}, {0, 0, 0});
    for (int64_t r = 0; r < 3; ++r) {
        TensorValue e({3});
        e.data[static_cast<size_t>(r)] = 1.0;
        auto res = grad(d, {}, {}, {x}, {e});
        for (int64_t c = 0; c < 3; ++c) {
            double expect = ((r == c ? 1.0 : 0.0) - 1.0 / 3.0) / 3.0;
            REQUIRE(res.input_grads[0].at({c}) == Catch::Approx(expect).margin(1e-12));
        }
    }
}

namespace {

// central finite differences on a scalar functional of the diagram output
double fd_check(const Diagram& d, const Binding& b, const ParamStore& params,
                std::vector<TensorValue> inputs, double step = 1e-4) {
    auto outs = eval(d, b, params, inputs);
    std::vector<TensorValue> cots;
    CounterRng wr(99, "fdw");
    for (auto& o : outs) {
        TensorValue c(o.shape);
        for (auto& v : c.data) v = wr.next_uniform(-1, 1);
        cots.push_back(c);
    }
    auto res = grad(d, b, params, inputs, cots);
    double worst = 0;
    for (size_t ii = 0; ii < inputs.size(); ++ii) {
        for (size_t k = 0; k < inputs[ii].data.size(); ++k) {
            auto probe = [&](double delta) {
                auto ins2 = inputs;
                ins2[ii].data[k] += delta;
                auto o2 = eval(d, b, params, ins2);
                double acc = 0;
                for (size_t oi = 0; oi < o2.size(); ++oi)
                    for (size_t j = 0; j < o2[oi].data.size(); ++j)
                        acc += o2[oi].data[j] * cots[oi].data[j];
                return acc;
            };
            double fd = (probe(step) - probe(-step)) / (2 * step);
            double an = res.input_grads[ii].data[k];
            double err = std::abs(fd - an) / (1e-12 + std::max(std::abs(fd), std::abs(an)));
            if (std::abs(fd) < 1e-7 && std::abs(an) < 1e-7) err = 0;
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace

TEST_CASE("finite differences agree for every differentiable primitive") {
    Binding b{{"s", 4}, {"d", 3}, {"c", 5}};
    auto check = [&](const Diagram& d, std::vector<TensorValue> ins, double tol = 1e-4) {
        REQUIRE(fd_check(d, b, {}, std::move(ins)) < tol);
    };
    check(box_diagram(elementwise("exp", SD)), {rnd({4, 3}, 11, "a")});
    check(box_diagram(elementwise("phi", SD)), {rnd({4, 3}, 12, "b")});
    check(box_diagram(elementwise("recip", SD)), {rnd({4, 3}, 13, "c", 0.5, 2.0)});
    check(box_diagram(elementwise("neg", SD)), {rnd({4, 3}, 14, "d")});
    check(box_diagram(scale_box(SD, D)), {rnd({4, 3}, 15, "e")});
    check(box_diagram(softmax_box(SD)), {rnd({4, 3}, 16, "f", -2, 2)});
    check(box_diagram(scaled_softmax_box(Shape{S.with_role("q"), S.with_role("k")}, D)),
          {rnd({4, 4}, 17, "g", -2, 2)});
    check(box_diagram(scaled_softmax_box(Shape{S.with_role("q"), S.with_role("k")}, D, true)),
          {rnd({4, 4}, 171, "gc", -2, 2)});
    check(box_diagram(layer_norm_box(SD)),
          {rnd({4, 3}, 18, "h"), rnd({3}, 18, "h2", 0.5, 1.5), rnd({3}, 18, "h3")});
    check(box_diagram(add_box(SD, Shape{D})), {rnd({4, 3}, 19, "i"), rnd({3}, 19, "i2")});
    check(box_diagram(mul_box(SD, Shape{D})), {rnd({4, 3}, 20, "j"), rnd({3}, 20, "j2")});
    check(box_diagram(div_box(SD, Shape{D})), {rnd({4, 3}, 21, "k"), rnd({3}, 21, "k2", 0.5, 2.0)});
    check(box_diagram(div_lead_box(SD, Shape{S})), {rnd({4, 3}, 211, "kl"), rnd({4}, 211, "kl2", 0.5, 2.0)});
    check(box_diagram(mul_lead_box(SD, Shape{S})), {rnd({4, 3}, 212, "km"), rnd({4}, 212, "km2")});
    check(box_diagram(concat_box(SD, SD)), {rnd({4, 3}, 22, "l"), rnd({4, 3}, 22, "l2")});
    check(box_diagram(contract_box(SD, Shape{D, DimSym::fixed("c")})),
          {rnd({4, 3}, 23, "m"), rnd({3, 5}, 23, "m2")});
    check(box_diagram(reverse_box(SD, 0)), {rnd({4, 3}, 24, "n")});
    check(box_diagram(reshape_box(SD, Shape{D, S}, {1, 0})), {rnd({4, 3}, 25, "o")});
    check(box_diagram(broadcast_box(Shape{D}, S)), {rnd({3}, 26, "p")});
    check(box_diagram(pack2_box(Shape{D})), {rnd({3}, 27, "q"), rnd({3}, 27, "q2")});
    check(box_diagram(unpack2_box(Shape{D})), {rnd({2, 3}, 28, "r")});
    check(box_diagram(prim("prefix_outer", {SD, SD}, {Shape{S, D, D}})),
          {rnd({4, 3}, 29, "s"), rnd({4, 3}, 29, "s2")});
    check(box_diagram(prim("prefix_sum0", {SD}, {SD})), {rnd({4, 3}, 30, "t")});
    check(box_diagram(prim("shift_inject", {Shape{D}, SD}, {Shape{D}, SD})),
          {rnd({3}, 31, "u"), rnd({4, 3}, 31, "u2")});
    check(box_diagram(prim("gaussian_window", {Shape{}, Shape{}}, {Shape{S}})),
          {TensorValue({}, {1.3}), TensorValue({}, {0.8})});
    // learnable box with parameters
    Box ua = learnable_box("uu", {SD}, {SD});
    ParamStore ps;
    ps.entries.emplace("uu", instantiate_ua_entry<double>(ua, Binding{{"s", 4}, {"d", 3}}, 41));
    REQUIRE(fd_check(box_diagram(ua), b, ps, {rnd({4, 3}, 42, "v")}) < 1e-4);
}

TEST_CASE("parameter gradients match finite differences") {
    Binding b{{"s", 3}, {"d", 4}};
    Box ua = learnable_box("w", {SD}, {SD});
    Diagram d = box_diagram(ua);
    ParamStore ps;
    ps.entries.emplace("w", instantiate_ua_entry<double>(ua, b, 50));
    TensorValue x = rnd({3, 4}, 51, "x");
    TensorValue cot = rnd({3, 4}, 52, "c");
    auto res = grad(d, b, ps, {x}, {cot});
    auto& gW = res.params.entries.at("w").mlp.layers[0].W;
    double step = 1e-5;
    for (size_t k = 0; k < 6; ++k) {
        size_t idx = (k * 7) % gW.data.size();
        auto probe = [&](double delta) {
            ParamStore p2 = ps;
            p2.entries.at("w").mlp.layers[0].W.data[idx] += delta;
            auto o = eval(d, b, p2, {x});
            double acc = 0;
            for (size_t j = 0; j < o[0].data.size(); ++j) acc += o[0].data[j] * cot.data[j];
            return acc;
        };
        double fd = (probe(step) - probe(-step)) / (2 * step);
        REQUIRE(gW.data[idx] == Catch::Approx(fd).epsilon(1e-4).margin(1e-8));
    }
}

TEST_CASE("simd with residual backpropagates through the fold") {
    Shape H{DimSym::fixed("h")};
    Box cell = learnable_box("cell", {H, H}, {H, H});
    Diagram rnn = make_simd(box_diagram(cell), S, H);
    Binding b{{"s", 4}, {"h", 3}};
    ParamStore ps;
    ps.entries.emplace("cell", instantiate_ua_entry<double>(cell, b, 60));
    REQUIRE(fd_check(rnn, b, ps, {rnd({3}, 61, "h0"), rnd({4, 3}, 61, "xs")}) < 1e-4);
}

TEST_CASE("profile counts contraction flops and peak tensor size") {
    Shape a{DimSym::fixed("a"), DimSym::fixed("b")};
    Shape c{DimSym::fixed("b"), DimSym::fixed("c")};
    Diagram d = box_diagram(contract_box(a, c));
    Binding bind{{"a", 3}, {"b", 4}, {"c", 5}};
    Profile p = profile(d, bind, {}, {rnd({3, 4}, 70, "a"), rnd({4, 5}, 70, "b")});
    REQUIRE(p.per_box.at("contract") == 3 * 4 * 5);
    REQUIRE(p.max_live == 20);  // the 4x5 operand
}

TEST_CASE("tensor container round trips") {
    TensorValue t = rnd({2, 3, 4}, 80, "io");
    write_atnt("/tmp/attncalc_test.atnt", t);
    TensorValue u = read_atnt("/tmp/attncalc_test.atnt");
    REQUIRE(t.shape == u.shape);
    REQUIRE(t.data == u.data);
}

TEST_CASE("diagram text format round trips") {
    Builder b2;
    Val x2 = b2.input(SD);
    auto [a2, c2] = b2.copy(x2);
    Val q2 = b2.add1(learnable_box("q", {SD}, {SD}), {a2});
    Val k2 = b2.add1(learnable_box("k", {SD}, {SD}), {c2});
    Val att2 = b2.add1(contract_box(SD, SD, 1, 1), {q2, k2});
    Val sm = b2.add1(scaled_softmax_box(att2.shape, D), {att2});
    b2.output(sm);
    Diagram d2 = b2.finish();
    REQUIRE(validate(d2).ok());

    std::string text = print_diagram(d2);
    Diagram parsed = parse_diagram(text);
    REQUIRE(validate(parsed).ok());
    REQUIRE(print_diagram(parsed) == text);
    REQUIRE(canonicalize(parsed) == canonicalize(d2));

    // simd nesting round trips too
    Diagram body = box_diagram(elementwise("exp", Shape{D}));
    Diagram lifted = make_simd(body, S);
    std::string t2 = print_diagram(lifted);
    REQUIRE(print_diagram(parse_diagram(t2)) == t2);
}
