#ifndef BIMAPPER_DATASET_HPP
#define BIMAPPER_DATASET_HPP

// Synthetic datasets: generation (parallel over scenes), the train/validation
// split, and the on-disk directory layout
//
//   DIR/manifest.json
//   DIR/scene_00000/cams.json, view_K.pgm, gt_ego.pgm, gt_cam_K.pgm (+ .json sidecars)

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "bimapper/io.hpp"
#include "bimapper/synthworld.hpp"

namespace bimapper {

struct Dataset {
	WorldConfig world;
	std::uint64_t base_seed = 0;
	std::vector<std::uint64_t> seeds;
	std::vector<Frame> frames;
	std::vector<std::size_t> train;
	std::vector<std::size_t> val;
};

// Every fifth scene (index % 5 == 4) is held out.
inline bool is_validation(std::size_t index) { return index % 5 == 4; }

inline void assign_split(Dataset& d) {
	d.train.clear();
	d.val.clear();
	for (std::size_t i = 0; i < d.frames.size(); ++i) {
		(is_validation(i) ? d.val : d.train).push_back(i);
	}
}

// Worker count: BIMAPPER_THREADS when set and positive, else the hardware
// concurrency.
inline unsigned worker_count() {
	if (const char* env = std::getenv("BIMAPPER_THREADS")) {
		const long v = std::strtol(env, nullptr, 10);
		if (v > 0) return static_cast<unsigned>(v);
	}
	return std::max(1u, std::thread::hardware_concurrency());
}

// Runs fn(i) for i in [0, n) on up to `threads` workers. The first exception
// is rethrown after all workers stop.
template <class Fn>
void parallel_for(std::size_t n, unsigned threads, Fn fn) {
	threads = static_cast<unsigned>(std::min<std::size_t>(std::max(1u, threads), std::max<std::size_t>(n, 1)));
	std::atomic<std::size_t> next{0};
	std::exception_ptr err;
	std::mutex mu;
	auto work = [&]() {
		for (std::size_t i = next++; i < n; i = next++) {
			try {
				fn(i);
			} catch (...) {
				std::lock_guard lock(mu);
				if (!err) err = std::current_exception();
				next = n;
			}
		}
	};
	if (threads == 1) {
		work();
	} else {
		std::vector<std::thread> pool;
		for (unsigned t = 0; t < threads; ++t) pool.emplace_back(work);
		for (auto& t : pool) t.join();
	}
	if (err) std::rethrow_exception(err);
}

inline Dataset make_dataset(const WorldConfig& world, std::size_t scenes, std::uint64_t base_seed,
                            unsigned threads = worker_count()) {
	if (scenes == 0) throw DatasetEmpty("dataset needs at least one scene");
	Dataset d;
	d.world = world;
	d.base_seed = base_seed;
	d.frames.resize(scenes);
	for (std::size_t i = 0; i < scenes; ++i) d.seeds.push_back(scene_seed(base_seed, i));
	parallel_for(scenes, threads, [&](std::size_t i) { d.frames[i] = render_frame(generate_scene(d.seeds[i], world)); });
	assign_split(d);
	return d;
}

namespace io {

inline std::string scene_dir_name(std::size_t i) {
	char buf[32];
	std::snprintf(buf, sizeof buf, "scene_%05zu", i);
	return buf;
}

inline json dataset_manifest(const Dataset& d) {
	json scenes = json::array();
	for (std::size_t i = 0; i < d.frames.size(); ++i) {
		scenes.push_back({{"dir", scene_dir_name(i)}, {"seed", d.seeds[i]}});
	}
	return {{"format", "bimapper-dataset"},
	        {"version", 1},
	        {"base_seed", d.base_seed},
	        {"config", d.world},
	        {"scenes", scenes},
	        {"splits", {{"train", d.train}, {"val", d.val}}}};
}

inline void write_frame(const fs::path& dir, const Frame& f, const IpmSpec& ipm) {
	write_cams(dir / "cams.json", f.cams, ipm);
	for (std::size_t v = 0; v < f.images.size(); ++v) {
		write_grid(dir / ("view_" + std::to_string(v) + ".pgm"), f.images[v], "pixel");
		write_grid(dir / ("gt_cam_" + std::to_string(v) + ".pgm"), f.camera_gt[v], "camera");
	}
	write_grid(dir / "gt_ego.pgm", f.ego_gt, "ego");
}

inline void write_dataset(const fs::path& dir, const Dataset& d, unsigned threads = worker_count()) {
	std::error_code ec;
	fs::create_directories(dir, ec);
	if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
	parallel_for(d.frames.size(), threads,
	             [&](std::size_t i) { write_frame(dir / scene_dir_name(i), d.frames[i], d.world.ipm); });
	write_json(dir / "manifest.json", dataset_manifest(d));
}

inline Frame read_frame(const fs::path& dir) {
	Frame f;
	const Calibration cal = read_cams(dir / "cams.json");
	f.cams = cal.views;
	for (std::size_t v = 0; v < f.cams.size(); ++v) {
		f.images.push_back(read_grid(dir / ("view_" + std::to_string(v) + ".pgm")));
		f.camera_gt.push_back(read_grid(dir / ("gt_cam_" + std::to_string(v) + ".pgm")));
	}
	f.ego_gt = read_grid(dir / "gt_ego.pgm");
	return f;
}

inline Dataset read_dataset(const fs::path& dir, unsigned threads = worker_count()) {
	const json m = read_json(dir / "manifest.json");
	Dataset d;
	std::vector<std::string> dirs;
	try {
		m.at("config").get_to(d.world);
		d.base_seed = m.at("base_seed").get<std::uint64_t>();
		for (const auto& s : m.at("scenes")) {
			dirs.push_back(s.at("dir").get<std::string>());
			d.seeds.push_back(s.at("seed").get<std::uint64_t>());
		}
		m.at("splits").at("train").get_to(d.train);
		m.at("splits").at("val").get_to(d.val);
	} catch (const json::exception& e) {
		throw IoError("malformed dataset manifest in " + dir.string() + ": " + e.what());
	}
	if (dirs.empty()) throw DatasetEmpty("dataset " + dir.string() + " has no scenes");
	d.frames.resize(dirs.size());
	parallel_for(dirs.size(), threads, [&](std::size_t i) { d.frames[i] = read_frame(dir / dirs[i]); });
	for (auto i : d.train) {
		if (i >= d.frames.size()) throw IoError("split index out of range in " + dir.string());
	}
	for (auto i : d.val) {
		if (i >= d.frames.size()) throw IoError("split index out of range in " + dir.string());
	}
	return d;
}

} // namespace io

} // namespace bimapper

#endif
