#ifndef BIMAPPER_IPM_HPP
#define BIMAPPER_IPM_HPP

#include <string>

#include "bimapper/geometry.hpp"
#include "bimapper/grid.hpp"

namespace bimapper {

// Inverse perspective warp of a pixel-frame class image onto the camera's
// ground plane. Each output cell samples the nearest source pixel of its
// centre; cells that project outside the frame become VOID.
inline SemanticGrid ipm_warp(const SemanticGrid& image, const CameraIntrinsics& k,
                             const IpmSpec& spec) {
	if (image.width != k.width || image.height != k.height) {
		throw ShapeMismatch("image " + std::to_string(image.width) + "x" +
		                    std::to_string(image.height) + " vs intrinsics " +
		                    std::to_string(k.width) + "x" + std::to_string(k.height));
	}
	SemanticGrid out(GridLayout::from(spec));
	for (int r = 0; r < out.height; ++r) {
		for (int c = 0; c < out.width; ++c) {
			int u = 0;
			int v = 0;
			if (nearest_pixel(cam_to_pixel(spec.cell_center(c, r), k), k, u, v)) {
				out.at(c, r) = image.at(u, v);
			}
		}
	}
	return out;
}

// Flat source-pixel index sampled by every warp cell (-1 when out of frame).
// Lets callers warp many images under one calibration without re-projecting.
inline std::vector<int> ipm_sample_table(const CameraIntrinsics& k, const IpmSpec& spec) {
	std::vector<int> table(static_cast<std::size_t>(spec.out_width) * spec.out_height, -1);
	for (int r = 0; r < spec.out_height; ++r) {
		for (int c = 0; c < spec.out_width; ++c) {
			int u = 0;
			int v = 0;
			if (nearest_pixel(cam_to_pixel(spec.cell_center(c, r), k), k, u, v)) {
				table[static_cast<std::size_t>(r) * spec.out_width + c] = v * k.width + u;
			}
		}
	}
	return table;
}

} // namespace bimapper

#endif
