#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "bimapper/geometry.hpp"

using namespace bimapper;

namespace {

CameraIntrinsics make_k(double fx, double fy, double cx, double cy, int w, int h) {
	CameraIntrinsics k;
	k.fx = fx;
	k.fy = fy;
	k.cx = cx;
	k.cy = cy;
	k.width = w;
	k.height = h;
	return k;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

} // namespace

TEST(CamToPixel, OpticalAxisHitsPrincipalPoint) {
	const auto k = make_k(1, 1, 0, 0, 1, 1);
	const PixelCoord px = cam_to_pixel({0, 0, 1}, k);
	EXPECT_EQ(px.u, 0.0);
	EXPECT_EQ(px.v, 0.0);
}

TEST(CamToPixel, MatchesMatrixProduct) {
	const auto k = make_k(2, 2, 100, 50, 200, 100);
	const Eigen::Vector3d p(1, 1, 2);
	const Eigen::Vector3d h = k.matrix() * p;  // Z_c [u v 1]^T = K p
	const PixelCoord px = cam_to_pixel({1, 1, 2}, k);
	EXPECT_DOUBLE_EQ(px.u, h.x() / h.z());
	EXPECT_DOUBLE_EQ(px.v, h.y() / h.z());
	EXPECT_DOUBLE_EQ(px.u, 101.0);
	EXPECT_DOUBLE_EQ(px.v, 51.0);
}

TEST(CamToPixel, BehindCameraThrows) {
	const auto k = make_k(500, 500, 320, 240, 640, 480);
	EXPECT_THROW(cam_to_pixel({0, 0, -1}, k), NonPositiveDepth);
	EXPECT_THROW(cam_to_pixel({0, 0, 0}, k), NonPositiveDepth);
}

TEST(PixelToPlane, HandInversion) {
	const auto k = make_k(1000, 1000, 400, 200, 800, 400);
	IpmSpec spec;
	const CamPoint p = pixel_to_cam_on_plane({400, 400}, k, spec);
	EXPECT_DOUBLE_EQ(p.x, 0.0);
	EXPECT_DOUBLE_EQ(p.y, 1.0);
	EXPECT_DOUBLE_EQ(p.z, 5.0);
	const PixelCoord back = cam_to_pixel(p, k);
	EXPECT_DOUBLE_EQ(back.u, 400.0);
	EXPECT_DOUBLE_EQ(back.v, 400.0);
}

TEST(PixelToPlane, HorizonThrows) {
	const auto k = make_k(1000, 1000, 400, 200, 800, 400);
	IpmSpec spec;
	EXPECT_THROW(pixel_to_cam_on_plane({10, 200}, k, spec), HorizonSingularity);
	EXPECT_THROW(pixel_to_cam_on_plane({10, 200 + 0.5e-6}, k, spec), HorizonSingularity);
	EXPECT_THROW(pixel_to_cam_on_plane({10, 100}, k, spec), HorizonSingularity);
}

TEST(PixelToPlane, RoundTripAndPlaneInvariant) {
	std::mt19937_64 rng(3);
	std::uniform_real_distribution<double> uu(0, 800), vv(200.001, 400);
	const auto k = make_k(900, 1100, 400, 200, 800, 400);
	IpmSpec spec;
	spec.plane_height = 1.3;
	for (int i = 0; i < 2000; ++i) {
		const PixelCoord px{uu(rng), vv(rng)};
		const CamPoint p = pixel_to_cam_on_plane(px, k, spec);
		EXPECT_EQ(p.y, spec.plane_height);
		EXPECT_GT(p.z, 0.0);
		const PixelCoord back = cam_to_pixel(p, k);
		EXPECT_LT(rel_err(back.u, px.u), 1e-9);
		EXPECT_LT(rel_err(back.v, px.v), 1e-9);
	}
}

TEST(Extrinsics, IdentityLeavesPointsUnchanged) {
	CameraExtrinsics e;
	const EgoPoint w = cam_to_ego({1.5, -2, 7}, e);
	EXPECT_EQ(w.x, 1.5);
	EXPECT_EQ(w.y, -2);
	EXPECT_EQ(w.z, 7);
}

TEST(Extrinsics, YawNinetyMatchesHomogeneousOracle) {
	CameraExtrinsics e = CameraExtrinsics::from_mount({0, 0, 0}, std::numbers::pi / 2);
	e.translation = Eigen::Vector3d(1, 0, 0);
	// T_ex written out by hand: camera x = ego -z, camera z = ego +x.
	Eigen::Matrix4d t;
	t << 0, 0, -1, 1,
	     0, 1, 0, 0,
	     1, 0, 0, 0,
	     0, 0, 0, 1;
	EXPECT_LT((e.matrix() - t).cwiseAbs().maxCoeff(), 1e-15);
	const Eigen::Vector4d c = t * Eigen::Vector4d(0, 0, 1, 1);
	const CamPoint got = ego_to_cam({0, 0, 1}, e);
	EXPECT_NEAR(got.x, c.x(), 1e-15);
	EXPECT_NEAR(got.y, c.y(), 1e-15);
	EXPECT_NEAR(got.z, c.z(), 1e-15);
	const Eigen::Vector4d w = t.inverse() * Eigen::Vector4d(0, 0, 1, 1);
	const EgoPoint back = cam_to_ego({0, 0, 1}, e);
	EXPECT_NEAR(back.x, w.x(), 1e-15);
	EXPECT_NEAR(back.y, w.y(), 1e-15);
	EXPECT_NEAR(back.z, w.z(), 1e-15);
}

TEST(Extrinsics, MountYawLooksAlongExpectedAxis) {
	const auto fwd = [](double yaw) {
		const auto e = CameraExtrinsics::from_mount({0, -1, 0}, yaw);
		return Eigen::Vector3d(e.rotation.transpose().col(2));
	};
	EXPECT_LT((fwd(0) - Eigen::Vector3d(0, 0, 1)).norm(), 1e-15);
	EXPECT_LT((fwd(std::numbers::pi / 2) - Eigen::Vector3d(1, 0, 0)).norm(), 1e-15);
	// mount height 1: the ground below is Y_c = 1
	const auto e = CameraExtrinsics::from_mount({0, -1, 0}, 0.3);
	EXPECT_NEAR(ego_to_cam({2, 0, 5}, e).y, 1.0, 1e-15);
}

TEST(Extrinsics, RandomRoundTrip) {
	std::mt19937_64 rng(11);
	std::uniform_real_distribution<double> c(-100, 100), a(-std::numbers::pi, std::numbers::pi);
	for (int i = 0; i < 1000; ++i) {
		const Eigen::Matrix3d r = (Eigen::AngleAxisd(a(rng), Eigen::Vector3d::UnitY()) *
		                           Eigen::AngleAxisd(a(rng), Eigen::Vector3d::UnitX()) *
		                           Eigen::AngleAxisd(a(rng), Eigen::Vector3d::UnitZ()))
		                              .toRotationMatrix();
		CameraExtrinsics e;
		e.rotation = r;
		e.translation = Eigen::Vector3d(c(rng), c(rng), c(rng));
		e.validate();
		const CamPoint p{c(rng), c(rng), c(rng)};
		const CamPoint q = ego_to_cam(cam_to_ego(p, e), e);
		EXPECT_NEAR(q.x, p.x, 1e-12);
		EXPECT_NEAR(q.y, p.y, 1e-12);
		EXPECT_NEAR(q.z, p.z, 1e-12);
	}
}

TEST(Validation, RejectsBadCalibration) {
	EXPECT_THROW(make_k(0, 1, 0, 0, 10, 10).validate(), InvalidArgument);
	EXPECT_THROW(make_k(1, 1, 10, 0, 10, 10).validate(), InvalidArgument);
	EXPECT_NO_THROW(make_k(1, 1, 9.5, 0, 10, 10).validate());
	CameraExtrinsics e;
	e.rotation(0, 0) = 1.001;
	EXPECT_THROW(e.validate(), InvalidArgument);
	CameraExtrinsics m;
	m.rotation(0, 0) = -1;  // reflection
	EXPECT_THROW(m.validate(), InvalidArgument);
	IpmSpec s;
	s.z_range = {0, 10};
	EXPECT_THROW(s.validate(), InvalidArgument);
}

TEST(Footprint, GrowsWithDepth) {
	const auto k = make_k(1000, 1000, 400, 200, 800, 400);
	IpmSpec spec;
	double last_z = 0.0, last_dz = 0.0, last_dx = 0.0;
	for (int v = 399; v > 200; --v) {
		const PixelCoord px{400, static_cast<double>(v)};
		const auto [dz, dx] = pixel_footprint(px, k, spec);
		const double z = pixel_to_cam_on_plane(px, k, spec).z;
		EXPECT_GT(z, last_z);
		EXPECT_GE(dz, last_dz);
		EXPECT_GE(dx, last_dx);
		// central difference of the back-projection; a whole-pixel secant would
		// differ from the tangent by 0.25/(v-cy)^2 near the horizon
		const double h = 1e-4;
		const double fd = (pixel_to_cam_on_plane({400, v - h}, k, spec).z -
		                   pixel_to_cam_on_plane({400, v + h}, k, spec).z) / (2 * h);
		EXPECT_NEAR(dz, fd, 1e-6 * fd);
		last_z = z;
		last_dz = dz;
		last_dx = dx;
	}
}
