#ifndef BIMAPPER_SYNTHWORLD_HPP
#define BIMAPPER_SYNTHWORLD_HPP

// Deterministic synthetic road scenes: a curved multi-lane road with boundary,
// divider and pedestrian-crossing markings, seen by a ring of pinhole cameras
// mounted at plane height above the ground.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "bimapper/error.hpp"
#include "bimapper/geometry.hpp"
#include "bimapper/grid.hpp"
#include "bimapper/ipm.hpp"

namespace bimapper {

struct CameraView {
	CameraIntrinsics intrinsics;
	CameraExtrinsics extrinsics;
	double yaw = 0.0;
	EgoPoint position;
};

struct RigConfig {
	int views = 4;
	int image_width = 128;
	int image_height = 64;
	double hfov_deg = 120.0;
	// Horizon row; rows at or above it see sky and are VOID.
	double cy = 0.0;
	// Ground distance imaged by the bottom row.
	double near_z = 3.0;
	// Horizontal offset of each camera from the ego origin along its heading.
	double mount_offset = 1.0;
};

struct SceneConfig {
	int lanes_min = 2;
	int lanes_max = 4;
	double lane_width = 3.5;
	double curvature_max = 0.006;
	double heading_max = 0.05;
	double crossing_probability = 0.5;
	double divider_width = 0.8;
	double boundary_width = 0.8;
	double crossing_width = 3.0;
	// Polylines are sampled along z every `sample_step` metres.
	double sample_step = 1.0;
};

// Everything needed to turn a seed into a frame.
struct WorldConfig {
	GridSpec grid;
	IpmSpec ipm;
	RigConfig rig;
	SceneConfig scene;

	// Desk-scale world: 0.5 m ego raster and 0.5 m warp cells.
	static WorldConfig desk() {
		WorldConfig w;
		w.grid.resolution = 0.5;
		w.ipm.out_width = 20;
		w.ipm.out_height = 52;
		return w;
	}
};

struct LayoutElement {
	ClassId class_id = classes::kBackground;
	std::vector<Point2> polyline;
	double width = 0.0;
};

struct SceneSpec {
	std::uint64_t seed = 0;
	std::vector<LayoutElement> layout;
	std::vector<CameraView> rig;
	GridSpec grid;
	IpmSpec ipm;
};

struct Frame {
	std::vector<SemanticGrid> images;
	std::vector<CameraView> cams;
	SemanticGrid ego_gt;
	std::vector<SemanticGrid> camera_gt;
};

inline std::vector<CameraView> build_rig(const RigConfig& rc, double plane_height) {
	if (rc.views < 1) {
		throw InvalidArgument("rig needs at least one view");
	}
	std::vector<CameraView> rig;
	const double half_fov = 0.5 * rc.hfov_deg * std::numbers::pi / 180.0;
	for (int i = 0; i < rc.views; ++i) {
		CameraView v;
		v.intrinsics.width = rc.image_width;
		v.intrinsics.height = rc.image_height;
		v.intrinsics.cx = 0.5 * (rc.image_width - 1);
		v.intrinsics.cy = rc.cy;
		v.intrinsics.fx = 0.5 * rc.image_width / std::tan(half_fov);
		v.intrinsics.fy = rc.near_z * (rc.image_height - 1 - rc.cy) / plane_height;
		v.intrinsics.validate();
		v.yaw = 2.0 * std::numbers::pi * i / rc.views;
		// Round so that axis-aligned mounts land on exact metre offsets.
		auto snap = [](double a) { return std::abs(a) < 1e-12 ? 0.0 : a; };
		v.position = {snap(rc.mount_offset * std::sin(v.yaw)), -plane_height,
		              snap(rc.mount_offset * std::cos(v.yaw))};
		v.extrinsics = CameraExtrinsics::from_mount(v.position, v.yaw);
		rig.push_back(v);
	}
	return rig;
}

namespace detail {

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
	return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {
	return std::uniform_int_distribution<int>(lo, hi)(rng);
}

// Keeps the longest run of consecutive points inside the box.
inline std::vector<Point2> clip_polyline(const std::vector<Point2>& pts, double xmax, double zmax) {
	std::vector<Point2> best;
	std::vector<Point2> run;
	for (const auto& p : pts) {
		if (std::abs(p.x) <= xmax && std::abs(p.z) <= zmax) {
			run.push_back(p);
		} else {
			if (run.size() > best.size()) best = run;
			run.clear();
		}
	}
	if (run.size() > best.size()) best = run;
	return best;
}

} // namespace detail

inline void validate_scene(const SceneSpec& s) {
	const double xmax = 1.5 * std::max(std::abs(s.grid.x_range.first), std::abs(s.grid.x_range.second));
	const double zmax = 1.5 * std::max(std::abs(s.grid.z_range.first), std::abs(s.grid.z_range.second));
	for (const auto& el : s.layout) {
		if (el.polyline.size() < 2) {
			throw InvalidArgument("layout element with fewer than 2 points");
		}
		for (const auto& p : el.polyline) {
			if (std::abs(p.x) > xmax + 1e-9 || std::abs(p.z) > zmax + 1e-9) {
				throw InvalidArgument("layout point outside 1.5x the grid extent");
			}
		}
	}
	std::set<long long> yaws;
	for (const auto& v : s.rig) {
		yaws.insert(std::llround(v.yaw * 1e9));
	}
	if (yaws.size() != s.rig.size()) {
		throw InvalidArgument("rig views must have distinct yaws");
	}
}

inline SceneSpec generate_scene(std::uint64_t seed, const WorldConfig& cfg) {
	const SceneConfig& sc = cfg.scene;
	if (sc.lanes_min < 1 || sc.lanes_max < sc.lanes_min) {
		throw InvalidArgument("invalid lane count range");
	}
	std::mt19937_64 rng(seed);
	SceneSpec s;
	s.seed = seed;
	s.grid = cfg.grid;
	s.ipm = cfg.ipm;
	s.rig = build_rig(cfg.rig, cfg.ipm.plane_height);

	const int lanes = detail::uniform_int(rng, sc.lanes_min, sc.lanes_max);
	const double road_w = lanes * sc.lane_width;
	const int ego_lane = detail::uniform_int(rng, 0, lanes - 1);
	const double jitter = detail::uniform(rng, -0.5, 0.5);
	const double offset = 0.5 * road_w - (ego_lane + 0.5) * sc.lane_width + jitter;
	const double curvature = detail::uniform(rng, -sc.curvature_max, sc.curvature_max);
	const double heading = detail::uniform(rng, -sc.heading_max, sc.heading_max);
	const bool crossing = detail::uniform(rng, 0.0, 1.0) < sc.crossing_probability;
	const double crossing_z = detail::uniform(rng, -20.0, 20.0);

	auto center = [&](double z) { return offset + heading * z + 0.5 * curvature * z * z; };

	const double xmax = 1.5 * std::max(std::abs(cfg.grid.x_range.first), std::abs(cfg.grid.x_range.second));
	const double zmax = 1.5 * std::max(std::abs(cfg.grid.z_range.first), std::abs(cfg.grid.z_range.second));

	auto line_at = [&](double lateral) {
		std::vector<Point2> pts;
		for (double z = -zmax; z <= zmax + 1e-9; z += sc.sample_step) {
			pts.push_back({center(z) + lateral, z});
		}
		return detail::clip_polyline(pts, xmax, zmax);
	};

	// Painter's order: boundary, then divider, then crossing.
	for (double side : {-0.5, 0.5}) {
		auto pts = line_at(side * road_w);
		if (pts.size() >= 2) {
			s.layout.push_back({classes::kBoundary, std::move(pts), sc.boundary_width});
		}
	}
	for (int i = 1; i < lanes; ++i) {
		auto pts = line_at(-0.5 * road_w + i * sc.lane_width);
		if (pts.size() >= 2) {
			s.layout.push_back({classes::kDivider, std::move(pts), sc.divider_width});
		}
	}
	if (crossing) {
		const double cx = center(crossing_z);
		std::vector<Point2> pts{{cx - 0.5 * road_w, crossing_z}, {cx + 0.5 * road_w, crossing_z}};
		pts = detail::clip_polyline(pts, xmax, zmax);
		if (pts.size() >= 2) {
			s.layout.push_back({classes::kPedCrossing, std::move(pts), sc.crossing_width});
		}
	}
	validate_scene(s);
	return s;
}

inline SemanticGrid rasterize_layout(const SceneSpec& s) {
	SemanticGrid g(s.grid, classes::kBackground);
	for (const auto& el : s.layout) {
		paint_polyline(g, el.polyline, el.width, el.class_id);
	}
	return g;
}

// Renders the pixel-frame class image seen by `view` of an ego raster:
// each pixel below the horizon is back-projected onto the ground and takes the
// class of the ego cell it lands in.
inline SemanticGrid render_view(const SemanticGrid& ego, const CameraView& view, const IpmSpec& ipm) {
	const CameraIntrinsics& k = view.intrinsics;
	const GridLayout& g = ego.metric();
	SemanticGrid img(k.width, k.height, classes::kVoid);
	for (int v = 0; v < k.height; ++v) {
		if (!(v - k.cy > ipm.horizon_eps)) continue;
		for (int u = 0; u < k.width; ++u) {
			const CamPoint p = pixel_to_cam_on_plane({static_cast<double>(u), static_cast<double>(v)}, k, ipm);
			const EgoPoint w = cam_to_ego(p, view.extrinsics);
			if (const auto cell = world_to_cell(w.x, w.z, g)) {
				img.at(u, v) = ego.at(cell->col, cell->row);
			}
		}
	}
	return img;
}

// True when the ego ground point is inside `view`'s warp footprint and images
// below the horizon inside the frame.
inline bool observes(const CameraView& view, const IpmSpec& ipm, double x, double z) {
	const CamPoint c = ego_to_cam({x, 0.0, z}, view.extrinsics);
	if (!(c.z > 0.0)) return false;
	if (!world_to_cell(c.x, c.z, GridLayout::from(ipm))) return false;
	const PixelCoord px = cam_to_pixel(c, view.intrinsics);
	if (!(px.v - view.intrinsics.cy > ipm.horizon_eps)) return false;
	int u = 0;
	int v = 0;
	return nearest_pixel(px, view.intrinsics, u, v);
}

inline Frame render_frame(const SceneSpec& s) {
	Frame f;
	f.cams = s.rig;
	const SemanticGrid full = rasterize_layout(s);
	for (const auto& view : s.rig) {
		f.images.push_back(render_view(full, view, s.ipm));
	}
	f.ego_gt = full;
	const GridLayout& g = full.metric();
	for (int r = 0; r < g.rows; ++r) {
		for (int c = 0; c < g.cols; ++c) {
			const auto [x, z] = g.center(c, r);
			bool seen = false;
			for (const auto& view : s.rig) {
				if (observes(view, s.ipm, x, z)) {
					seen = true;
					break;
				}
			}
			if (!seen) f.ego_gt.at(c, r) = classes::kVoid;
		}
	}
	for (const auto& view : s.rig) {
		f.camera_gt.push_back(ego_gt_to_camera_gt(f.ego_gt, view.extrinsics, view.intrinsics, s.ipm));
	}
	return f;
}

// Seed of scene `index` in a dataset drawn from `base_seed` (splitmix64).
inline std::uint64_t scene_seed(std::uint64_t base_seed, std::uint64_t index) {
	std::uint64_t z = base_seed + 0x9E3779B97F4A7C15ULL * (index + 1);
	z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
	z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
	return z ^ (z >> 31);
}

} // namespace bimapper

#endif
