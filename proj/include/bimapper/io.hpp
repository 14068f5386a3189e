#ifndef BIMAPPER_IO_HPP
#define BIMAPPER_IO_HPP

// On-disk formats: binary PGM class rasters with JSON layout sidecars,
// calibration JSON, and palette PNG export.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "bimapper/error.hpp"
#include "bimapper/geometry.hpp"
#include "bimapper/grid.hpp"
#include "bimapper/synthworld.hpp"

namespace bimapper::io {

namespace fs = std::filesystem;
using nlohmann::json;

inline std::string read_file(const fs::path& p) {
	std::ifstream in(p, std::ios::binary);
	if (!in) throw IoError("cannot open " + p.string());
	return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const fs::path& p, const std::string& bytes) {
	if (p.has_parent_path()) {
		std::error_code ec;
		fs::create_directories(p.parent_path(), ec);
		if (ec) throw IoError("cannot create " + p.parent_path().string() + ": " + ec.message());
	}
	std::ofstream out(p, std::ios::binary | std::ios::trunc);
	if (!out) throw IoError("cannot write " + p.string());
	out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
	if (!out) throw IoError("short write to " + p.string());
}

inline json read_json(const fs::path& p) {
	try {
		return json::parse(read_file(p));
	} catch (const json::exception& e) {
		throw IoError("malformed JSON in " + p.string() + ": " + e.what());
	}
}

inline void write_json(const fs::path& p, const json& j) { write_file(p, j.dump(2) + "\n"); }

} // namespace bimapper::io

// JSON forms of the world configuration, found by ADL.
namespace bimapper {


inline void to_json(nlohmann::json& j, const GridSpec& g) {
	j = {{"x_range", {g.x_range.first, g.x_range.second}},
	     {"z_range", {g.z_range.first, g.z_range.second}},
	     {"resolution", g.resolution}};
}
inline void from_json(const nlohmann::json& j, GridSpec& g) {
	g.x_range = {j.at("x_range").at(0).get<double>(), j.at("x_range").at(1).get<double>()};
	g.z_range = {j.at("z_range").at(0).get<double>(), j.at("z_range").at(1).get<double>()};
	g.resolution = j.at("resolution").get<double>();
}

inline void to_json(nlohmann::json& j, const IpmSpec& s) {
	j = {{"plane_height", s.plane_height},
	     {"x_range", {s.x_range.first, s.x_range.second}},
	     {"z_range", {s.z_range.first, s.z_range.second}},
	     {"out_width", s.out_width},
	     {"out_height", s.out_height},
	     {"horizon_eps", s.horizon_eps}};
}
inline void from_json(const nlohmann::json& j, IpmSpec& s) {
	s.plane_height = j.at("plane_height").get<double>();
	s.x_range = {j.at("x_range").at(0).get<double>(), j.at("x_range").at(1).get<double>()};
	s.z_range = {j.at("z_range").at(0).get<double>(), j.at("z_range").at(1).get<double>()};
	s.out_width = j.at("out_width").get<int>();
	s.out_height = j.at("out_height").get<int>();
	s.horizon_eps = j.value("horizon_eps", 1e-6);
}

inline void to_json(nlohmann::json& j, const RigConfig& r) {
	j = {{"views", r.views},       {"image_width", r.image_width}, {"image_height", r.image_height},
	     {"hfov_deg", r.hfov_deg}, {"cy", r.cy},                   {"near_z", r.near_z},
	     {"mount_offset", r.mount_offset}};
}
inline void from_json(const nlohmann::json& j, RigConfig& r) {
	j.at("views").get_to(r.views);
	j.at("image_width").get_to(r.image_width);
	j.at("image_height").get_to(r.image_height);
	j.at("hfov_deg").get_to(r.hfov_deg);
	j.at("cy").get_to(r.cy);
	j.at("near_z").get_to(r.near_z);
	j.at("mount_offset").get_to(r.mount_offset);
}

inline void to_json(nlohmann::json& j, const SceneConfig& s) {
	j = {{"lanes_min", s.lanes_min},
	     {"lanes_max", s.lanes_max},
	     {"lane_width", s.lane_width},
	     {"curvature_max", s.curvature_max},
	     {"heading_max", s.heading_max},
	     {"crossing_probability", s.crossing_probability},
	     {"divider_width", s.divider_width},
	     {"boundary_width", s.boundary_width},
	     {"crossing_width", s.crossing_width},
	     {"sample_step", s.sample_step},
	     {"paint_order", {"boundary", "divider", "ped_crossing"}}};
}
inline void from_json(const nlohmann::json& j, SceneConfig& s) {
	j.at("lanes_min").get_to(s.lanes_min);
	j.at("lanes_max").get_to(s.lanes_max);
	j.at("lane_width").get_to(s.lane_width);
	j.at("curvature_max").get_to(s.curvature_max);
	j.at("heading_max").get_to(s.heading_max);
	j.at("crossing_probability").get_to(s.crossing_probability);
	j.at("divider_width").get_to(s.divider_width);
	j.at("boundary_width").get_to(s.boundary_width);
	j.at("crossing_width").get_to(s.crossing_width);
	j.at("sample_step").get_to(s.sample_step);
}

inline void to_json(nlohmann::json& j, const WorldConfig& w) {
	j = {{"grid", w.grid}, {"ipm", w.ipm}, {"rig", w.rig}, {"scene", w.scene}};
}
inline void from_json(const nlohmann::json& j, WorldConfig& w) {
	j.at("grid").get_to(w.grid);
	j.at("ipm").get_to(w.ipm);
	j.at("rig").get_to(w.rig);
	j.at("scene").get_to(w.scene);
}

} // namespace bimapper

namespace bimapper::io {

// -------------------------------------------------------------- calibration

inline json camera_to_json(const CameraView& v) {
	json rot = json::array();
	for (int r = 0; r < 3; ++r) {
		for (int c = 0; c < 3; ++c) rot.push_back(v.extrinsics.rotation(r, c));
	}
	const auto& t = v.extrinsics.translation;
	return {{"fx", v.intrinsics.fx},         {"fy", v.intrinsics.fy},         {"cx", v.intrinsics.cx},
	        {"cy", v.intrinsics.cy},         {"width", v.intrinsics.width},   {"height", v.intrinsics.height},
	        {"rotation", rot},               {"translation", {t.x(), t.y(), t.z()}}};
}

inline CameraView camera_from_json(const json& j) {
	CameraView v;
	try {
		v.intrinsics.fx = j.at("fx").get<double>();
		v.intrinsics.fy = j.at("fy").get<double>();
		v.intrinsics.cx = j.at("cx").get<double>();
		v.intrinsics.cy = j.at("cy").get<double>();
		v.intrinsics.width = j.at("width").get<int>();
		v.intrinsics.height = j.at("height").get<int>();
		const auto& rot = j.at("rotation");
		const auto& tr = j.at("translation");
		if (rot.size() != 9 || tr.size() != 3) {
			throw InvalidArgument("rotation needs 9 numbers and translation 3");
		}
		for (int r = 0; r < 3; ++r) {
			for (int c = 0; c < 3; ++c) v.extrinsics.rotation(r, c) = rot.at(r * 3 + c).get<double>();
		}
		v.extrinsics.translation = {tr.at(0).get<double>(), tr.at(1).get<double>(), tr.at(2).get<double>()};
	} catch (const json::exception& e) {
		throw InvalidArgument(std::string("bad calibration entry: ") + e.what());
	}
	v.intrinsics.validate();
	v.extrinsics.validate();
	const Eigen::Vector3d pos = -(v.extrinsics.rotation.transpose() * v.extrinsics.translation);
	v.position = {pos.x(), pos.y(), pos.z()};
	const Eigen::Vector3d fwd = v.extrinsics.rotation.transpose().col(2);
	v.yaw = std::atan2(fwd.x(), fwd.z());
	return v;
}

// cams.json: {"views": [per-view calibration], "ipm": {...}}. A bare array of
// per-view objects is accepted as well.
inline void write_cams(const fs::path& p, const std::vector<CameraView>& cams, const IpmSpec& ipm) {
	json views = json::array();
	for (const auto& c : cams) views.push_back(camera_to_json(c));
	write_json(p, {{"views", views}, {"ipm", ipm}});
}

struct Calibration {
	std::vector<CameraView> views;
	IpmSpec ipm;
};

inline Calibration read_cams(const fs::path& p) {
	const json j = read_json(p);
	Calibration cal;
	const json& views = j.is_array() ? j : j.at("views");
	for (const auto& v : views) cal.views.push_back(camera_from_json(v));
	if (j.is_object() && j.contains("ipm")) j.at("ipm").get_to(cal.ipm);
	return cal;
}

// ---------------------------------------------------------------------- PGM

inline std::string encode_pgm(const SemanticGrid& g) {
	std::string out = "P5\n" + std::to_string(g.width) + " " + std::to_string(g.height) + "\n255\n";
	out.append(reinterpret_cast<const char*>(g.data.data()), g.data.size());
	return out;
}

inline SemanticGrid decode_pgm(const std::string& bytes, const std::string& origin = "<memory>") {
	std::size_t pos = 0;
	auto token = [&]() {
		while (pos < bytes.size()) {
			if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
				++pos;
			} else if (bytes[pos] == '#') {
				while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
			} else {
				break;
			}
		}
		const std::size_t start = pos;
		while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
		return bytes.substr(start, pos - start);
	};
	if (token() != "P5") throw IoError(origin + ": not a binary PGM");
	int w = 0, h = 0, maxval = 0;
	try {
		w = std::stoi(token());
		h = std::stoi(token());
		maxval = std::stoi(token());
	} catch (const std::exception&) {
		throw IoError(origin + ": malformed PGM header");
	}
	if (w <= 0 || h <= 0 || maxval != 255) throw IoError(origin + ": unsupported PGM geometry");
	++pos;  // single whitespace before the raster
	const std::size_t n = static_cast<std::size_t>(w) * h;
	if (bytes.size() < pos + n) throw IoError(origin + ": truncated PGM raster");
	SemanticGrid g(w, h);
	std::copy(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
	          bytes.begin() + static_cast<std::ptrdiff_t>(pos + n), g.data.begin());
	return g;
}

inline json layout_json(const SemanticGrid& g, const std::string& frame) {
	json j = {{"frame", frame}, {"cols", g.width}, {"rows", g.height}};
	if (g.layout) {
		const GridLayout& l = *g.layout;
		j["x_range"] = {l.x_min, l.x_min + l.dx * l.cols};
		j["z_range"] = {l.z_min, l.z_min + l.dz * l.rows};
		j["cell_size"] = {l.dx, l.dz};
		if (std::abs(l.dx - l.dz) < 1e-12) j["resolution"] = l.dx;
	}
	return j;
}

// Writes `<stem>.pgm` and its `<stem>.json` sidecar.
inline void write_grid(const fs::path& pgm, const SemanticGrid& g, const std::string& frame) {
	write_file(pgm, encode_pgm(g));
	fs::path side = pgm;
	side.replace_extension(".json");
	write_json(side, layout_json(g, frame));
}

inline SemanticGrid read_grid(const fs::path& pgm) {
	SemanticGrid g = decode_pgm(read_file(pgm), pgm.string());
	fs::path side = pgm;
	side.replace_extension(".json");
	if (fs::exists(side)) {
		const json j = read_json(side);
		if (j.contains("x_range")) {
			GridLayout l;
			l.x_min = j.at("x_range").at(0).get<double>();
			l.z_min = j.at("z_range").at(0).get<double>();
			l.dx = j.at("cell_size").at(0).get<double>();
			l.dz = j.at("cell_size").at(1).get<double>();
			l.cols = g.width;
			l.rows = g.height;
			g.layout = l;
		}
	}
	return g;
}

// ---------------------------------------------------------------------- PNG

using Rgb = std::array<std::uint8_t, 3>;

inline Rgb palette(ClassId c) {
	switch (c) {
	case classes::kBackground: return {40, 40, 40};
	case classes::kDivider: return {255, 200, 0};
	case classes::kPedCrossing: return {0, 160, 255};
	case classes::kBoundary: return {230, 40, 40};
	default: return {0, 0, 0};  // VOID and anything unexpected
	}
}

namespace detail {
inline void put_u32(std::string& s, std::uint32_t v) {
	for (int i = 3; i >= 0; --i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_chunk(std::string& out, const char* type, const std::string& data) {
	put_u32(out, static_cast<std::uint32_t>(data.size()));
	std::string body(type, 4);
	body += data;
	out += body;
	put_u32(out, static_cast<std::uint32_t>(
	                 crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()))));
}
} // namespace detail

// RGB PNG of a class raster with the fixed palette; row 0 of the grid (the
// minimum-z edge) is drawn at the bottom so forward points up.
inline std::string encode_png(const SemanticGrid& g) {
	std::string raw;
	raw.reserve(static_cast<std::size_t>(g.height) * (1 + 3 * g.width));
	for (int r = g.height - 1; r >= 0; --r) {
		raw.push_back(0);
		for (int c = 0; c < g.width; ++c) {
			const Rgb px = palette(g.at(c, r));
			raw.append(reinterpret_cast<const char*>(px.data()), 3);
		}
	}
	uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
	std::string z(zlen, '\0');
	if (compress2(reinterpret_cast<Bytef*>(z.data()), &zlen, reinterpret_cast<const Bytef*>(raw.data()),
	              static_cast<uLong>(raw.size()), 9) != Z_OK) {
		throw IoError("PNG compression failed");
	}
	z.resize(zlen);
	std::string out("\x89PNG\r\n\x1a\n", 8);
	std::string ihdr;
	detail::put_u32(ihdr, static_cast<std::uint32_t>(g.width));
	detail::put_u32(ihdr, static_cast<std::uint32_t>(g.height));
	ihdr += std::string("\x08\x02\x00\x00\x00", 5);
	detail::put_chunk(out, "IHDR", ihdr);
	detail::put_chunk(out, "IDAT", z);
	detail::put_chunk(out, "IEND", "");
	return out;
}

} // namespace bimapper::io

#endif
