#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "prn/align.hpp"
#include "prn/geometry.hpp"

using namespace prn;

namespace {

Shape3D random_shape(int n_p, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Shape3D s(3, n_p);
    for (int c = 0; c < n_p; ++c)
        for (int r = 0; r < 3; ++r) s(r, c) = normal(rng);
    return s;
}

ShapeBatch random_batch(int n_f, int n_p, std::uint64_t seed) {
    std::vector<Shape3D> frames(n_f);
    for (int i = 0; i < n_f; ++i) frames[i] = random_shape(n_p, seed * 1000 + i);
    return ShapeBatch(std::move(frames));
}

Rotation rot_z(double angle) {
    return Rotation(Eigen::AngleAxisd(angle, Eigen::Vector3d::UnitZ()));
}

}  // namespace

TEST_CASE("gpa on identical shapes is the fixed point") {
    const Shape3D x = center(random_shape(6, 5));
    ShapeBatch batch({x, x, x, x});
    const AlignmentState state = gpa_align(batch);
    REQUIRE(state.converged);
    REQUIRE(state.residual < 1e-20);
    for (const auto& r : state.rotations)
        REQUIRE((r - Rotation::Identity()).cwiseAbs().maxCoeff() < 1e-12);
    REQUIRE((state.mean_shape - x).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("gpa aligns a rotated copy back onto the original") {
    const Shape3D x0 = center(random_shape(8, 17));
    ShapeBatch batch({x0, rot_z(M_PI / 2.0) * x0});
    const AlignmentState state = gpa_align(batch, 1e-14, 300);
    REQUIRE(state.converged);
    REQUIRE((state.aligned.frames[0] - state.aligned.frames[1]).cwiseAbs().maxCoeff() < 1e-8);

    // Brute-force oracle: the objective over the relative z-angle of frame 2
    // attains its minimum (zero) where gpa ends up.
    double best = std::numeric_limits<double>::infinity();
    for (int k = 0; k < 3600; ++k) {
        const double theta = 2.0 * M_PI * k / 3600.0;
        const Shape3D a0 = x0;
        const Shape3D a1 = rot_z(theta) * rot_z(M_PI / 2.0) * x0;
        const Shape3D mean = 0.5 * (a0 + a1);
        best = std::min(best, (a0 - mean).squaredNorm() + (a1 - mean).squaredNorm());
    }
    REQUIRE(state.residual <= best + 1e-10);
}

TEST_CASE("gpa propagates degeneracy for co-linear frames") {
    Shape3D line(3, 6);
    for (int p = 0; p < 6; ++p) line.col(p) = p * Eigen::Vector3d(0.5, -1.0, 2.0);
    ShapeBatch batch({center(random_shape(6, 2)), center(line)});
    REQUIRE_THROWS_AS(gpa_align(batch), DegenerateShape);
}

TEST_CASE("gpa flags non-convergence at max_iter") {
    ShapeBatch batch = random_batch(5, 7, 33);
    const AlignmentState state = gpa_align(batch, 1e-16, 1);
    REQUIRE_FALSE(state.converged);
    REQUIRE(state.iterations == 1);
}

TEST_CASE("gpa objective is monotone per sweep") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        ShapeBatch batch = random_batch(4, 6, 100 + seed);
        const AlignmentState state = gpa_align(batch);
        REQUIRE(state.converged);
        for (size_t k = 1; k < state.objective_history.size(); ++k)
            REQUIRE(state.objective_history[k] <=
                    state.objective_history[k - 1] * (1.0 + 1e-12) + 1e-15);
    }
}

TEST_CASE("gpa stationarity: every aligned frame is Kabsch-optimal vs the mean") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        ShapeBatch batch = random_batch(5, 8, 500 + seed);
        const AlignmentState state = gpa_align(batch, 1e-12, 200);
        REQUIRE(state.converged);
        for (int i = 0; i < state.size(); ++i) {
            const Rotation r = kabsch_rotation(state.aligned.frames[i], state.mean_shape);
            REQUIRE((r - Rotation::Identity()).cwiseAbs().maxCoeff() < 1e-6);
        }
    }
}

TEST_CASE("gpa mean consistency and centering invariants") {
    ShapeBatch batch = random_batch(6, 9, 77);
    const AlignmentState state = gpa_align(batch);
    Shape3D mean = Shape3D::Zero(3, 9);
    for (const auto& a : state.aligned.frames) {
        REQUIRE(is_centered(a, 1e-9));
        mean += a;
    }
    mean /= 6.0;
    REQUIRE((mean - state.mean_shape).cwiseAbs().maxCoeff() < 1e-10);
    for (int i = 0; i < 6; ++i) {
        const Shape3D expect = state.rotations[i] * center(batch.frames[i]);
        REQUIRE((expect - state.aligned.frames[i]).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("gpa gauge covariance: global pre-rotation leaves singular values") {
    ShapeBatch batch = random_batch(5, 7, 88);
    const Rotation s = random_rotation(4242);
    ShapeBatch rotated = batch;
    for (auto& f : rotated.frames) f = s * f;

    const Eigen::VectorXd sv1 =
        Eigen::JacobiSVD<Eigen::MatrixXd>(to_aligned_matrix(gpa_align(batch, 1e-13, 300)))
            .singularValues();
    const Eigen::VectorXd sv2 =
        Eigen::JacobiSVD<Eigen::MatrixXd>(to_aligned_matrix(gpa_align(rotated, 1e-13, 300)))
            .singularValues();
    REQUIRE((sv1 - sv2).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("to_aligned_matrix vectorizes columns and round-trips") {
    const Shape3D x = center(random_shape(5, 9));
    ShapeBatch batch({x, x, x});
    AlignmentState state = gpa_align(batch);
    const Eigen::MatrixXd m = to_aligned_matrix(state);
    REQUIRE(m.rows() == 15);
    REQUIRE(m.cols() == 3);
    REQUIRE((m.col(0) - m.col(1)).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE(Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()(1) < 1e-12);

    const ShapeBatch back = from_aligned_matrix(m);
    for (int i = 0; i < 3; ++i)
        REQUIRE((back.frames[i] - state.aligned.frames[i]).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("to_aligned_matrix on a handcrafted 2-frame batch") {
    // manual vectorization oracle: n_f = 2, n_p = 3
    Shape3D a(3, 3), b(3, 3);
    a << 1, -1, 0,
         2,  0, -2,
         0,  1, -1;
    b = rot_z(0.3) * a;
    ShapeBatch batch({center(a), center(b)});
    AlignmentState state = gpa_align(batch, 1e-14, 300);
    const Eigen::MatrixXd m = to_aligned_matrix(state);
    for (int j = 0; j < 2; ++j)
        for (int p = 0; p < 3; ++p)
            for (int r = 0; r < 3; ++r)
                REQUIRE(m(3 * p + r, j) == state.aligned.frames[j](r, p));
}

TEST_CASE("transversality holds at convergence and fails off it") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        ShapeBatch batch = random_batch(5, 8, 900 + seed);
        AlignmentState state = gpa_align(batch, 1e-13, 300);
        REQUIRE(state.converged);
        REQUIRE(check_transversality(state, 20, 1e-6));

        // perturbation oracle: nudge one rotation off the optimum
        AlignmentState bad = state;
        const Rotation nudge(Eigen::AngleAxisd(0.05, Eigen::Vector3d::UnitX()));
        bad.rotations[1] = nudge * bad.rotations[1];
        bad.aligned.frames[1] = nudge * bad.aligned.frames[1];
        Shape3D mean = Shape3D::Zero(3, 8);
        for (const auto& f : bad.aligned.frames) mean += f;
        bad.mean_shape = mean / 5.0;
        REQUIRE_FALSE(check_transversality(bad, 20, 1e-6));
    }
}

TEST_CASE("transversality on a duplicated pair") {
    const Shape3D x = center(random_shape(6, 31));
    ShapeBatch batch({x, x});
    AlignmentState state = gpa_align(batch);
    REQUIRE(check_transversality(state, 20, 1e-6));
}
