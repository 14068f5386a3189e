#ifndef BIMAPPER_GEOMETRY_HPP
#define BIMAPPER_GEOMETRY_HPP

// Pixel, camera and ego frames and the closed-form transforms between them.
//
// Camera frame: x right, y down, z forward. The ego frame uses the same
// handedness with its origin on the ground below the vehicle, so the ground is
// Y_w = 0 and a level camera mounted h metres up sees it at Y_c = h.

#include <array>
#include <cmath>
#include <string>
#include <utility>

#include <Eigen/Dense>

#include "bimapper/error.hpp"

namespace bimapper {

struct PixelCoord {
	double u = 0.0;
	double v = 0.0;
};

struct CamPoint {
	double x = 0.0;
	double y = 0.0;
	double z = 0.0;
};

struct EgoPoint {
	double x = 0.0;
	double y = 0.0;
	double z = 0.0;
};

struct CameraIntrinsics {
	double fx = 1.0;
	double fy = 1.0;
	double cx = 0.0;
	double cy = 0.0;
	int width = 1;
	int height = 1;

	void validate() const {
		if (!(fx > 0.0) || !(fy > 0.0)) {
			throw InvalidArgument("focal lengths must be positive");
		}
		if (!(cx >= 0.0 && cx < width) || !(cy >= 0.0 && cy < height)) {
			throw InvalidArgument("principal point outside the image");
		}
	}

	[[nodiscard]] Eigen::Matrix3d matrix() const {
		Eigen::Matrix3d k;
		k << fx, 0, cx,
		     0, fy, cy,
		     0, 0, 1;
		return k;
	}
};

// Ego -> camera rigid transform: p_c = rotation * p_w + translation.
struct CameraExtrinsics {
	Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
	Eigen::Vector3d translation = Eigen::Vector3d::Zero();

	void validate(double tol = 1e-9) const {
		const Eigen::Matrix3d rtr = rotation.transpose() * rotation;
		if ((rtr - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > tol) {
			throw InvalidArgument("rotation is not orthonormal");
		}
		if (std::abs(rotation.determinant() - 1.0) > tol) {
			throw InvalidArgument("rotation determinant is not +1");
		}
	}

	// Camera mounted at `position` (ego frame) with heading `yaw` radians about
	// the down axis; yaw 0 looks along +z, yaw pi/2 along +x.
	static CameraExtrinsics from_mount(const EgoPoint& position, double yaw) {
		const double s = std::sin(yaw);
		const double c = std::cos(yaw);
		Eigen::Matrix3d cam_to_ego;
		// columns: camera x, y, z axes expressed in the ego frame
		cam_to_ego << c, 0, s,
		              0, 1, 0,
		              -s, 0, c;
		CameraExtrinsics e;
		e.rotation = cam_to_ego.transpose();
		e.translation = -(e.rotation * Eigen::Vector3d(position.x, position.y, position.z));
		return e;
	}

	[[nodiscard]] Eigen::Matrix4d matrix() const {
		Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
		m.topLeftCorner<3, 3>() = rotation;
		m.topRightCorner<3, 1>() = translation;
		return m;
	}
};

// Ground-plane warp parameters for the camera-frame (IPM) grid. Columns run
// along camera x, rows along camera z.
struct IpmSpec {
	double plane_height = 1.0;
	std::pair<double, double> x_range{-5.0, 5.0};
	std::pair<double, double> z_range{3.0, 29.0};
	int out_width = 800;
	int out_height = 400;
	double horizon_eps = 1e-6;

	void validate() const {
		if (!(x_range.first < x_range.second)) {
			throw InvalidArgument("ipm x_range must be increasing");
		}
		if (!(z_range.first > 0.0) || !(z_range.first < z_range.second)) {
			throw InvalidArgument("ipm z_range must be positive and increasing");
		}
		if (out_width <= 0 || out_height <= 0) {
			throw InvalidArgument("ipm output dimensions must be positive");
		}
	}

	[[nodiscard]] double cell_dx() const { return (x_range.second - x_range.first) / out_width; }
	[[nodiscard]] double cell_dz() const { return (z_range.second - z_range.first) / out_height; }

	// Plane point at the centre of cell (col, row).
	[[nodiscard]] CamPoint cell_center(int col, int row) const {
		return {x_range.first + (col + 0.5) * cell_dx(), plane_height,
		        z_range.first + (row + 0.5) * cell_dz()};
	}
};

inline PixelCoord cam_to_pixel(const CamPoint& p, const CameraIntrinsics& k) {
	if (!(p.z > 0.0)) {
		throw NonPositiveDepth("Z_c = " + std::to_string(p.z));
	}
	return {k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy};
}

// Back-projects a pixel onto the plane Y_c = spec.plane_height.
inline CamPoint pixel_to_cam_on_plane(const PixelCoord& px, const CameraIntrinsics& k,
                                      const IpmSpec& spec) {
	const double dv = px.v - k.cy;
	if (!(dv > spec.horizon_eps)) {
		throw HorizonSingularity("v = " + std::to_string(px.v) + " is not below the horizon");
	}
	const double y = spec.plane_height;
	const double z = k.fy * y / dv;
	return {(px.u - k.cx) * z / k.fx, y, z};
}

inline EgoPoint cam_to_ego(const CamPoint& p, const CameraExtrinsics& e) {
	const Eigen::Vector3d w = e.rotation.transpose() * (Eigen::Vector3d(p.x, p.y, p.z) - e.translation);
	return {w.x(), w.y(), w.z()};
}

inline CamPoint ego_to_cam(const EgoPoint& p, const CameraExtrinsics& e) {
	const Eigen::Vector3d c = e.rotation * Eigen::Vector3d(p.x, p.y, p.z) + e.translation;
	return {c.x(), c.y(), c.z()};
}

// Nearest pixel under the integer-centre convention; false when out of frame.
inline bool nearest_pixel(const PixelCoord& px, const CameraIntrinsics& k, int& col, int& row) {
	const double cu = std::floor(px.u + 0.5);
	const double rv = std::floor(px.v + 0.5);
	if (cu < 0 || rv < 0 || cu >= k.width || rv >= k.height) {
		return false;
	}
	col = static_cast<int>(cu);
	row = static_cast<int>(rv);
	return true;
}

// Ground footprint (metres along z, metres along x) of the source pixel at
// `px`, from the Jacobian of the plane back-projection.
inline std::pair<double, double> pixel_footprint(const PixelCoord& px, const CameraIntrinsics& k,
                                                 const IpmSpec& spec) {
	const CamPoint p = pixel_to_cam_on_plane(px, k, spec);
	const double dz_dv = p.z * p.z / (k.fy * spec.plane_height);
	const double dx_du = p.z / k.fx;
	return {dz_dv, dx_du};
}

} // namespace bimapper

#endif
