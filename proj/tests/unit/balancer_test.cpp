#include <doctest.h>

#include <cmath>

#include "../oracles.hpp"
#include "realcompo/balancer.hpp"
#include "realcompo/errors.hpp"
#include "realcompo/gradcheck.hpp"
#include "realcompo/rng.hpp"

using namespace realcompo;

namespace {

Box box(double x0, double y0, double x1, double y1, int token) {
    Box b;
    b.x0          = x0;
    b.y0          = y0;
    b.x1          = x1;
    b.y1          = y1;
    b.token_index = token;
    return b;
}

AttnMaps random_attn(int h, int w, int n, std::uint64_t seed) {
    AttnMaps a(h, w, n);
    Rng rng(seed, Stream::instances);
    for (std::size_t i = 0; i < a.pixels(); ++i) {
        double s = 0.0;
        for (int j = 0; j < n; ++j) {
            a.at(i, j) = rng.uniform();
            s += a.at(i, j);
        }
        for (int j = 0; j < n; ++j) {
            a.at(i, j) /= s;
        }
    }
    return a;
}

}  // namespace

TEST_CASE("coefficient init and softmax") {
    const CoeMap c = init_coe(4, 4, 42);
    CHECK(c.text == c.spatial);
    const double golden[] = {-1.1954312016348687, 0.64146159545403225,  0.092887738542866721, -1.0693493293553482,
                             -0.7502560167907133, 0.26216596397335407,  -0.34563750061675547, 2.4145322665068738,
                             -2.1364681449732315, 0.85773330071037557,  -0.87887228114545091, 0.45743501399376058,
                             1.2109668194073953,  -0.43827392607206273, 0.29759757945170001,  1.4604813802527827};
    for (int i = 0; i < 16; ++i) {
        CHECK(c.text[i] == golden[i]);
    }
    const XiMap xi = softmax_xi(c);
    for (std::size_t i = 0; i < 16; ++i) {
        CHECK(xi.text[i] == 0.5);
        CHECK(xi.spatial[i] == 0.5);
    }

    CoeMap d{Grid(1, 3), Grid(1, 3)};
    d.text[0] = 1.0;
    d.text[1] = 50.0;
    d.text[2] = -800.0;
    const XiMap x = softmax_xi(d);
    CHECK(std::round(x.text[0] * 1e6) / 1e6 == 0.731059);
    CHECK(std::abs(x.text[1] - 1.0) < 1e-9);
    CHECK(x.text[2] == 0.0);
    for (int i = 0; i < 3; ++i) {
        CHECK(x.text[i] + x.spatial[i] == doctest::Approx(1.0).epsilon(1e-15));
    }

    CoeMap bad{Grid(2, 2), Grid(2, 3)};
    CHECK_THROWS_AS(bad.validate(), ShapeError);
}

TEST_CASE("balance_noise") {
    Latent et(4, 4, 3), es(4, 4, 3);
    Rng rng(1, Stream::instances);
    rng.fill_normal(et);
    rng.fill_normal(es);

    XiMap one{Grid(4, 4, 1.0), Grid(4, 4, 0.0)};
    CHECK(balance_noise(one, et, es) == et);

    Latent two(1, 1, 1, 2.0), zero(1, 1, 1, 0.0);
    CHECK(balance_noise(XiMap{Grid(1, 1, 0.5), Grid(1, 1, 0.5)}, two, zero)[0] == 1.0);

    XiMap xi{Grid(4, 4), Grid(4, 4)};
    for (std::size_t i = 0; i < 16; ++i) {
        xi.text[i]    = rng.uniform();
        xi.spatial[i] = 1.0 - xi.text[i];
    }
    const Latent got = balance_noise(xi, et, es);
    for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 4; ++c) {
            for (int k = 0; k < 3; ++k) {
                const double want = xi.text.at(r, c) * et.at(r, c, k) + xi.spatial.at(r, c) * es.at(r, c, k);
                CHECK(got.at(r, c, k) == doctest::Approx(want).epsilon(1e-15));
            }
        }
    }
    CHECK_THROWS_AS(balance_noise(xi, et, Latent(4, 4, 2)), ShapeError);
}

TEST_CASE("alignment loss") {
    Layout quarter;
    quarter.boxes = {box(0, 0, 0.5, 0.5, 1)};
    const auto masks = layout_masks(quarter, 8, 8);

    const AttnMaps uniform(8, 8, 3, 1.0 / 3.0);
    CHECK(alignment_loss(uniform, uniform, masks) == 1.5);

    AttnMaps inside(8, 8, 3);
    for (int r = 0; r < 8; ++r) {
        for (int c = 0; c < 8; ++c) {
            inside.at(r, c, r < 4 && c < 4 ? 1 : 0) = 1.0;
        }
    }
    CHECK(alignment_loss(inside, inside, masks) == 0.0);

    AttnMaps outside(8, 8, 3);
    for (int r = 0; r < 8; ++r) {
        for (int c = 0; c < 8; ++c) {
            outside.at(r, c, r < 4 && c < 4 ? 0 : 1) = 1.0;
        }
    }
    CHECK(branch_loss(outside, masks) == 1.0);

    Layout two;
    two.boxes = {box(0.1, 0.2, 0.6, 0.9, 1), box(0.4, 0.0, 1.0, 0.5, 2)};
    const auto m2 = layout_masks(two, 8, 8);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const AttnMaps a = random_attn(8, 8, 3, seed), b = random_attn(8, 8, 3, seed + 100);
        const std::vector<oracle::BoxToken> bt{{two.boxes[0], 1}, {two.boxes[1], 2}};
        CHECK(std::abs(alignment_loss(a, b, m2) - (oracle::branch_loss(a, bt) + oracle::branch_loss(b, bt))) < 1e-12);
    }

    Layout unbound;
    unbound.boxes = {box(0, 0, 1, 1, -1)};
    CHECK_THROWS_AS(layout_masks(unbound, 4, 4), RangeError);
}

TEST_CASE("loss cotangent") {
    const AttnMaps uniform(4, 4, 2, 0.5);
    const BinaryMask full = rasterize(box(0, 0, 1, 1, 1), 4, 4);
    const Grid flat_cot = loss_attn_cotangent(uniform, full, 1);
    for (double v : flat_cot.data()) {
        CHECK(std::abs(v) < 1e-15);
    }

    const BinaryMask quarter = rasterize(box(0, 0, 0.5, 0.5, 1), 4, 4);
    const Grid g             = loss_attn_cotangent(uniform, quarter, 1);
    const double P = 16, m = 4, u = 0.5;
    for (std::size_t i = 0; i < 16; ++i) {
        const double want = quarter[i] ? (m - P) / (P * P * u) : m / (P * P * u);
        CHECK(g[i] == doctest::Approx(want).epsilon(1e-14));
    }

    Layout l;
    l.boxes             = {box(0.2, 0.1, 0.7, 0.8, 1), box(0.5, 0.5, 1.0, 1.0, 2)};
    const auto masks    = layout_masks(l, 4, 4);
    const AttnMaps a    = random_attn(4, 4, 3, 5);
    const Tensor3 cot   = branch_loss_cotangent(a, masks);
    const double h      = 1e-5;
    for (std::size_t i = 0; i < a.tensor().size(); ++i) {
        AttnMaps p = a, q = a;
        p.tensor()[i] += h;
        q.tensor()[i] -= h;
        const double fd = (alignment_loss(p, a, masks) - alignment_loss(q, a, masks)) / (2 * h);
        CHECK(cot[i] == doctest::Approx(fd).epsilon(1e-4));
    }
}

TEST_CASE("coefficient gradient") {
    GradcheckParams params;
    params.seed               = 3;
    const GradcheckInstance inst = make_gradcheck_instance(DenoiserKind::analytic, params);

    SUBCASE("full-image boxes give zero gradient") {
        Layout full = inst.layout;
        for (auto& b : full.boxes) {
            b.x0 = b.y0 = 0.0;
            b.x1 = b.y1 = 1.0;
        }
        const auto masks = layout_masks(full, 8, 8);
        const StepContext ctx{inst.z,      inst.t, inst.eps_text, inst.eps_spatial, *inst.text,
                              *inst.spatial, inst.tokens, full,   masks,            inst.sched};
        for (auto mode : {GradientMode::paper, GradientMode::full}) {
            const CoeGradient g = coe_gradient(ctx, inst.coe, mode, JacobianMode::paper);
            CHECK(g.text.l2_norm() < 1e-12);
            CHECK(g.spatial.l2_norm() < 1e-12);
        }
    }

    SUBCASE("equal branch noises") {
        const StepContext ctx{inst.z,        inst.t,      inst.eps_text, inst.eps_text, *inst.text,
                              *inst.spatial, inst.tokens, inst.layout,   inst.masks,    inst.sched};
        const CoeGradient full = coe_gradient(ctx, inst.coe, GradientMode::full, JacobianMode::paper);
        CHECK(full.text.l2_norm() == 0.0);
        CHECK(full.spatial.l2_norm() == 0.0);
        const CoeGradient paper = coe_gradient(ctx, inst.coe, GradientMode::paper, JacobianMode::paper);
        CHECK(paper.text.l2_norm() > 0.0);
    }

    SUBCASE("full mode matches finite differences") {
        const CheckReport rep = check_coe_gradient(inst, JacobianMode::paper, {});
        INFO(rep.worst);
        CHECK(rep.entries == 128);
        CHECK(rep.pass);
    }

    SUBCASE("update rule") {
        const CoeGradient g = coe_gradient(inst.context(), inst.coe, GradientMode::full, JacobianMode::paper);
        const CoeMap same   = update_coe(inst.coe, g.text, g.spatial, 0.0);
        CHECK(same.text == inst.coe.text);
        CHECK(same.spatial == inst.coe.spatial);
        const CoeMap still = update_coe(inst.coe, Grid(8, 8), Grid(8, 8), 0.1);
        CHECK(still.text == inst.coe.text);
        const CoeMap moved = update_coe(inst.coe, g.text, g.spatial, 0.1);
        CHECK(moved.text[5] == inst.coe.text[5] - 0.1 * g.text[5]);
        Grid nan(8, 8);
        nan[3] = std::nan("");
        CHECK_THROWS_AS(update_coe(inst.coe, nan, g.spatial, 0.1), NonFiniteError);
        CHECK_THROWS_AS(update_coe(inst.coe, Grid(4, 4), g.spatial, 0.1), ShapeError);
    }
}

TEST_CASE("single update descends on random 8x8 instances") {
    Rng pick(77, Stream::instances);
    int descended = 0;
    for (int trial = 0; trial < 100; ++trial) {
        GradcheckParams params;
        params.seed = 1000 + trial;
        params.t    = 5 + static_cast<int>(pick.below(41));
        const GradcheckInstance inst = make_gradcheck_instance(DenoiserKind::analytic, params);
        const StepContext ctx        = inst.context();
        const CoeGradient g          = coe_gradient(ctx, inst.coe, GradientMode::full, JacobianMode::paper);
        const CoeMap next            = update_coe(inst.coe, g.text, g.spatial, 0.1);
        descended += evaluate_alignment(ctx, next).loss < g.eval.loss;
    }
    CHECK(descended >= 95);
}

TEST_CASE("balancer config") {
    BalancerConfig c;
    CHECK_NOTHROW(c.validate());
    CHECK(c.rho_at(10, 50) == 0.1);
    c.rho_decay = RhoDecay::linear;
    CHECK(c.rho_at(10, 50) == doctest::Approx(0.02));
    c.rho = -1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK(parse_gradient_mode("full") == GradientMode::full);
    CHECK(parse_rho_decay("linear") == RhoDecay::linear);
    CHECK_THROWS_AS(parse_gradient_mode("half"), ConfigError);
}
