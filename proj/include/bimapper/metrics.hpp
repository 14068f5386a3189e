#ifndef BIMAPPER_METRICS_HPP
#define BIMAPPER_METRICS_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bimapper/error.hpp"
#include "bimapper/grid.hpp"

namespace bimapper {

struct IouCounts {
	std::size_t intersection = 0;
	std::size_t uni = 0;

	[[nodiscard]] double ratio() const {
		return uni == 0 ? 1.0 : static_cast<double>(intersection) / static_cast<double>(uni);
	}
	IouCounts& operator+=(const IouCounts& o) {
		intersection += o.intersection;
		uni += o.uni;
		return *this;
	}
};

inline IouCounts iou_counts(const SemanticGrid& pred, const SemanticGrid& gt, ClassId class_id) {
	if (!pred.same_shape(gt)) {
		throw ShapeMismatch("iou: " + std::to_string(pred.width) + "x" + std::to_string(pred.height) + " vs " +
		                    std::to_string(gt.width) + "x" + std::to_string(gt.height));
	}
	IouCounts c;
	for (std::size_t i = 0; i < gt.size(); ++i) {
		const ClassId p = pred.data[i];
		const ClassId g = gt.data[i];
		if (p == classes::kVoid || g == classes::kVoid) continue;
		const bool a = p == class_id;
		const bool b = g == class_id;
		c.intersection += a && b;
		c.uni += a || b;
	}
	return c;
}

// |M1 n M2| / |M1 u M2| over non-VOID cells; 1 when both sets are empty.
inline double iou(const SemanticGrid& pred, const SemanticGrid& gt, ClassId class_id) {
	return iou_counts(pred, gt, class_id).ratio();
}

struct ChamferResult {
	double cd_p = 0.0;
	double cd_l = 0.0;
	double cd = 0.0;
	bool defined = false;  // false when either point set is empty
};

namespace detail {

// Exact 1-D squared Euclidean distance transform (lower envelope of
// parabolas) in place over `f`, with `inf` marking empty cells.
inline void edt_1d(std::span<double> f, std::vector<double>& d, std::vector<int>& v, std::vector<double>& z) {
	const int n = static_cast<int>(f.size());
	d.resize(n);
	v.resize(n);
	z.resize(n + 1);
	int k = 0;
	v[0] = 0;
	z[0] = -std::numeric_limits<double>::infinity();
	z[1] = std::numeric_limits<double>::infinity();
	auto meet = [&](int q, int p) {
		return ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * q - 2.0 * p);
	};
	for (int q = 1; q < n; ++q) {
		double s = meet(q, v[k]);
		while (s <= z[k]) {
			--k;
			s = meet(q, v[k]);
		}
		++k;
		v[k] = q;
		z[k] = s;
		z[k + 1] = std::numeric_limits<double>::infinity();
	}
	k = 0;
	for (int q = 0; q < n; ++q) {
		while (z[k + 1] < q) ++k;
		const double dq = q - v[k];
		d[q] = dq * dq + f[v[k]];
	}
	std::copy(d.begin(), d.end(), f.begin());
}

// Squared distance from every cell of a w x h raster to the nearest seed.
inline std::vector<double> squared_distance_field(int w, int h, std::span<const CellIndex> seeds, int ox, int oz) {
	const double inf = 1e12;
	std::vector<double> g(static_cast<std::size_t>(w) * h, inf);
	for (const auto& s : seeds) g[static_cast<std::size_t>(s.row - oz) * w + (s.col - ox)] = 0.0;
	std::vector<double> d, z, col(h);
	std::vector<int> v;
	for (int c = 0; c < w; ++c) {
		for (int r = 0; r < h; ++r) col[r] = g[static_cast<std::size_t>(r) * w + c];
		edt_1d(col, d, v, z);
		for (int r = 0; r < h; ++r) g[static_cast<std::size_t>(r) * w + c] = col[r];
	}
	for (int r = 0; r < h; ++r) {
		edt_1d(std::span<double>(g.data() + static_cast<std::size_t>(r) * w, w), d, v, z);
	}
	return g;
}

} // namespace detail

// Chamfer distances between two cell sets, in metres. cd_p averages
// prediction->ground-truth nearest distances, cd_l the reverse, and cd is
// their point-count-weighted mean.
inline ChamferResult chamfer(std::span<const CellIndex> pred, std::span<const CellIndex> gt, double resolution) {
	ChamferResult out;
	if (pred.empty() || gt.empty()) return out;
	int c0 = pred[0].col, c1 = c0, r0 = pred[0].row, r1 = r0;
	for (auto set : {pred, gt}) {
		for (const auto& p : set) {
			c0 = std::min(c0, p.col);
			c1 = std::max(c1, p.col);
			r0 = std::min(r0, p.row);
			r1 = std::max(r1, p.row);
		}
	}
	const int w = c1 - c0 + 1;
	const int h = r1 - r0 + 1;
	auto mean_nearest = [&](std::span<const CellIndex> from, std::span<const CellIndex> to) {
		const std::vector<double> field = detail::squared_distance_field(w, h, to, c0, r0);
		double acc = 0.0;
		for (const auto& p : from) acc += std::sqrt(field[static_cast<std::size_t>(p.row - r0) * w + (p.col - c0)]);
		return acc / static_cast<double>(from.size()) * resolution;
	};
	out.cd_p = mean_nearest(pred, gt);
	out.cd_l = mean_nearest(gt, pred);
	const double np = static_cast<double>(pred.size());
	const double ng = static_cast<double>(gt.size());
	out.cd = (np * out.cd_p + ng * out.cd_l) / (np + ng);
	out.defined = true;
	return out;
}

inline std::vector<CellIndex> class_points(const SemanticGrid& g, ClassId class_id) {
	std::vector<CellIndex> pts;
	for (int r = 0; r < g.height; ++r) {
		for (int c = 0; c < g.width; ++c) {
			if (g.at(c, r) == class_id) pts.push_back({c, r});
		}
	}
	return pts;
}

struct ClassScore {
	double iou = 0.0;
	double cd_p = std::numeric_limits<double>::quiet_NaN();
	double cd_l = std::numeric_limits<double>::quiet_NaN();
	double cd = std::numeric_limits<double>::quiet_NaN();
};

struct EvalReport {
	std::array<ClassScore, classes::kForeground> per_class{};
	double mean_iou = 0.0;
};

// Accumulates IoU counts over frames (dataset-level IoU) and averages the
// Chamfer distances of frames where both point sets are non-empty.
class Evaluator {
public:
	explicit Evaluator(double resolution) : resolution_(resolution) {}

	void add(const SemanticGrid& pred, const SemanticGrid& gt) {
		if (!pred.same_shape(gt)) {
			throw ShapeMismatch("evaluate: prediction and ground truth differ in shape");
		}
		SemanticGrid p = pred;
		for (std::size_t i = 0; i < p.size(); ++i) {
			if (gt.data[i] == classes::kVoid) p.data[i] = classes::kVoid;
		}
		for (int c = 0; c < classes::kForeground; ++c) {
			const ClassId id = static_cast<ClassId>(c + 1);
			counts_[c] += iou_counts(p, gt, id);
			const auto pp = class_points(p, id);
			const auto gp = class_points(gt, id);
			const ChamferResult cr = chamfer(pp, gp, resolution_);
			if (cr.defined) {
				cd_p_[c] += cr.cd_p;
				cd_l_[c] += cr.cd_l;
				cd_[c] += cr.cd;
				++cd_frames_[c];
			}
		}
	}

	[[nodiscard]] EvalReport report() const {
		EvalReport r;
		double acc = 0.0;
		for (int c = 0; c < classes::kForeground; ++c) {
			r.per_class[c].iou = counts_[c].ratio();
			acc += r.per_class[c].iou;
			if (cd_frames_[c] > 0) {
				const double n = static_cast<double>(cd_frames_[c]);
				r.per_class[c].cd_p = cd_p_[c] / n;
				r.per_class[c].cd_l = cd_l_[c] / n;
				r.per_class[c].cd = cd_[c] / n;
			}
		}
		r.mean_iou = acc / classes::kForeground;
		return r;
	}

private:
	double resolution_;
	std::array<IouCounts, classes::kForeground> counts_{};
	std::array<double, classes::kForeground> cd_p_{}, cd_l_{}, cd_{};
	std::array<int, classes::kForeground> cd_frames_{};
};

inline nlohmann::json to_json(const EvalReport& r) {
	auto num = [](double x) { return std::isnan(x) ? nlohmann::json(nullptr) : nlohmann::json(x); };
	nlohmann::json j;
	for (int c = 0; c < classes::kForeground; ++c) {
		const ClassScore& s = r.per_class[c];
		j[classes::name(static_cast<ClassId>(c + 1))] = {
		    {"iou", s.iou}, {"cd_p", num(s.cd_p)}, {"cd_l", num(s.cd_l)}, {"cd", num(s.cd)}};
	}
	j["all"] = {{"iou", r.mean_iou}};
	return j;
}

// One row per class in class-ID order, then the all-class row.
inline std::string to_csv(const EvalReport& r) {
	std::ostringstream os;
	os.precision(6);
	os << "class,iou,cd_p,cd_l,cd\n";
	auto num = [&](double x) {
		if (!std::isnan(x)) os << x;
	};
	for (int c = 0; c < classes::kForeground; ++c) {
		const ClassScore& s = r.per_class[c];
		os << classes::name(static_cast<ClassId>(c + 1)) << ',' << s.iou << ',';
		num(s.cd_p);
		os << ',';
		num(s.cd_l);
		os << ',';
		num(s.cd);
		os << '\n';
	}
	os << "all," << r.mean_iou << ",,,\n";
	return os.str();
}

} // namespace bimapper

#endif
