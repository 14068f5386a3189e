#ifndef BIMAPPER_GRID_HPP
#define BIMAPPER_GRID_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bimapper/error.hpp"
#include "bimapper/geometry.hpp"

namespace bimapper {

using ClassId = std::uint8_t;

namespace classes {
inline constexpr ClassId kBackground = 0;
inline constexpr ClassId kDivider = 1;
inline constexpr ClassId kPedCrossing = 2;
inline constexpr ClassId kBoundary = 3;
inline constexpr ClassId kVoid = 255;
// Number of labels including background; foreground classes are 1..kCount-1.
inline constexpr int kCount = 4;
inline constexpr int kForeground = 3;

inline const char* name(ClassId c) {
	switch (c) {
	case kBackground: return "background";
	case kDivider: return "divider";
	case kPedCrossing: return "ped_crossing";
	case kBoundary: return "boundary";
	case kVoid: return "void";
	default: return "unknown";
	}
}
} // namespace classes

// Metric extent of the ego BEV raster. Columns run along x, rows along z.
struct GridSpec {
	std::pair<double, double> x_range{-15.0, 15.0};
	std::pair<double, double> z_range{-30.0, 30.0};
	double resolution = 0.15;

	[[nodiscard]] int cols() const {
		return static_cast<int>(std::lround((x_range.second - x_range.first) / resolution));
	}
	[[nodiscard]] int rows() const {
		return static_cast<int>(std::lround((z_range.second - z_range.first) / resolution));
	}

	void validate() const {
		if (!(resolution > 0.0)) {
			throw InvalidArgument("grid resolution must be positive");
		}
		const double nx = (x_range.second - x_range.first) / resolution;
		const double nz = (z_range.second - z_range.first) / resolution;
		if (nx < 1.0 || nz < 1.0 || std::abs(nx - std::round(nx)) > 1e-6 ||
		    std::abs(nz - std::round(nz)) > 1e-6) {
			throw InvalidArgument("grid extent is not an integer number of cells");
		}
	}

	bool operator==(const GridSpec&) const = default;
};

// Placement of a raster on a metric plane (ego ground or camera plane). Cells
// may be non-square, which the default warp geometry needs.
struct GridLayout {
	double x_min = 0.0;
	double z_min = 0.0;
	double dx = 1.0;
	double dz = 1.0;
	int cols = 0;
	int rows = 0;

	static GridLayout from(const GridSpec& g) {
		return {g.x_range.first, g.z_range.first, g.resolution, g.resolution, g.cols(), g.rows()};
	}
	static GridLayout from(const IpmSpec& s) {
		return {s.x_range.first, s.z_range.first, s.cell_dx(), s.cell_dz(), s.out_width, s.out_height};
	}

	[[nodiscard]] std::pair<double, double> center(int col, int row) const {
		return {x_min + (col + 0.5) * dx, z_min + (row + 0.5) * dz};
	}

	bool operator==(const GridLayout&) const = default;
};

struct CellIndex {
	int col = 0;
	int row = 0;
	bool operator==(const CellIndex&) const = default;
};

// Cell containing (x, z) under floor semantics, nullopt when outside. The 1e-9
// cell-unit slack keeps exact multiples of the resolution on the upper cell.
inline std::optional<CellIndex> world_to_cell(double x, double z, const GridLayout& g) {
	const double fx = (x - g.x_min) / g.dx;
	const double fz = (z - g.z_min) / g.dz;
	const double cx = std::floor(fx + 1e-9);
	const double cz = std::floor(fz + 1e-9);
	if (cx < 0 || cz < 0 || cx >= g.cols || cz >= g.rows) {
		return std::nullopt;
	}
	return CellIndex{static_cast<int>(cx), static_cast<int>(cz)};
}

inline std::optional<CellIndex> world_to_cell(double x, double z, const GridSpec& g) {
	return world_to_cell(x, z, GridLayout::from(g));
}

// Class-ID raster. `layout` is empty for pixel-frame images.
struct SemanticGrid {
	int width = 0;
	int height = 0;
	std::optional<GridLayout> layout;
	std::vector<ClassId> data;

	SemanticGrid() = default;
	SemanticGrid(int w, int h, ClassId fill = classes::kVoid)
		: width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {}
	explicit SemanticGrid(const GridLayout& l, ClassId fill = classes::kVoid)
		: SemanticGrid(l.cols, l.rows, fill) {
		layout = l;
	}
	explicit SemanticGrid(const GridSpec& g, ClassId fill = classes::kVoid)
		: SemanticGrid(GridLayout::from(g), fill) {}

	[[nodiscard]] ClassId at(int col, int row) const {
		return data[static_cast<std::size_t>(row) * width + col];
	}
	ClassId& at(int col, int row) { return data[static_cast<std::size_t>(row) * width + col]; }

	[[nodiscard]] std::size_t size() const { return data.size(); }

	[[nodiscard]] const GridLayout& metric() const {
		if (!layout) {
			throw InvalidArgument("grid has no metric layout");
		}
		return *layout;
	}

	[[nodiscard]] bool same_shape(const SemanticGrid& o) const {
		return width == o.width && height == o.height;
	}

	bool operator==(const SemanticGrid&) const = default;
};

struct Point2 {
	double x = 0.0;
	double z = 0.0;
	bool operator==(const Point2&) const = default;
};

inline double distance_to_segment(Point2 p, Point2 a, Point2 b) {
	const double vx = b.x - a.x;
	const double vz = b.z - a.z;
	const double len2 = vx * vx + vz * vz;
	double t = 0.0;
	if (len2 > 0.0) {
		t = std::clamp(((p.x - a.x) * vx + (p.z - a.z) * vz) / len2, 0.0, 1.0);
	}
	const double dx = p.x - (a.x + t * vx);
	const double dz = p.z - (a.z + t * vz);
	return std::sqrt(dx * dx + dz * dz);
}

// Point at which a cell is tested against a band: its centre nudged towards
// the lower corner so that centres exactly on the band edge resolve to the
// upper cell, consistent with world_to_cell.
inline Point2 band_probe(const GridLayout& g, int col, int row) {
	const auto [x, z] = g.center(col, row);
	return {x - 1e-7 * g.dx, z - 1e-7 * g.dz};
}

// Paints every cell whose probe point lies within width/2 of the polyline.
inline void paint_polyline(SemanticGrid& grid, std::span<const Point2> points, double width,
                           ClassId class_id) {
	if (points.size() < 2) {
		throw DegeneratePolyline("polyline needs at least 2 points, got " +
		                         std::to_string(points.size()));
	}
	const GridLayout& g = grid.metric();
	if (width < std::min(g.dx, g.dz) - 1e-12) {
		throw InvalidArgument("polyline width " + std::to_string(width) +
		                      " is below the grid resolution");
	}
	const double half = 0.5 * width;
	for (std::size_t s = 0; s + 1 < points.size(); ++s) {
		const Point2 a = points[s];
		const Point2 b = points[s + 1];
		const double x0 = std::min(a.x, b.x) - half;
		const double x1 = std::max(a.x, b.x) + half;
		const double z0 = std::min(a.z, b.z) - half;
		const double z1 = std::max(a.z, b.z) + half;
		const int c0 = std::max(0, static_cast<int>(std::floor((x0 - g.x_min) / g.dx)) - 1);
		const int c1 = std::min(g.cols - 1, static_cast<int>(std::floor((x1 - g.x_min) / g.dx)) + 1);
		const int r0 = std::max(0, static_cast<int>(std::floor((z0 - g.z_min) / g.dz)) - 1);
		const int r1 = std::min(g.rows - 1, static_cast<int>(std::floor((z1 - g.z_min) / g.dz)) + 1);
		for (int r = r0; r <= r1; ++r) {
			for (int c = c0; c <= c1; ++c) {
				if (distance_to_segment(band_probe(g, c, r), a, b) <= half) {
					grid.at(c, r) = class_id;
				}
			}
		}
	}
}

inline SemanticGrid rasterize_polyline(SemanticGrid grid, std::span<const Point2> points,
                                       double width, ClassId class_id) {
	paint_polyline(grid, points, width, class_id);
	return grid;
}

// Resamples ego-frame ground truth onto a camera's ground-plane grid by
// mapping each camera cell centre into the ego frame.
inline SemanticGrid ego_gt_to_camera_gt(const SemanticGrid& ego_gt, const CameraExtrinsics& e,
                                        const CameraIntrinsics& k, const IpmSpec& spec) {
	(void)k;
	const GridLayout& eg = ego_gt.metric();
	SemanticGrid out(GridLayout::from(spec));
	for (int r = 0; r < out.height; ++r) {
		for (int c = 0; c < out.width; ++c) {
			const EgoPoint w = cam_to_ego(spec.cell_center(c, r), e);
			if (const auto cell = world_to_cell(w.x, w.z, eg)) {
				out.at(c, r) = ego_gt.at(cell->col, cell->row);
			}
		}
	}
	return out;
}

} // namespace bimapper

#endif
