#ifndef BIMAPPER_TESTS_SUPPORT_HPP
#define BIMAPPER_TESTS_SUPPORT_HPP

// Shared test oracles: finite-difference gradient checks and brute-force
// metric references.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <random>
#include <vector>

#include "bimapper/autodiff.hpp"
#include "bimapper/grid.hpp"
#include "bimapper/metrics.hpp"

namespace bimapper::testing {

using DTensor = ad::Tensor<double>;

inline DTensor random_param(std::mt19937_64& rng, ad::Shape shape, double lo = -1.0, double hi = 1.0) {
	std::uniform_real_distribution<double> d(lo, hi);
	std::vector<double> v(ad::numel(shape));
	for (auto& x : v) x = d(rng);
	return DTensor::parameter(std::move(shape), std::move(v));
}

struct GradCheck {
	double max_rel = 0.0;
	std::size_t checked = 0;
};

// Compares reverse-mode gradients of the scalar f(params) with central
// differences of step h. The relative error of one entry is
// |analytic - numeric| / max(1, |analytic|, |numeric|).
inline GradCheck grad_check(std::vector<DTensor> params, const std::function<DTensor(const std::vector<DTensor>&)>& f,
                            double h = 1e-3) {
	for (auto& p : params) p.zero_grad();
	ad::backward(f(params));
	GradCheck out;
	for (auto& p : params) {
		const std::vector<double> analytic(p.grad().begin(), p.grad().end());
		auto data = p.data();
		for (std::size_t i = 0; i < data.size(); ++i) {
			const double x0 = data[i];
			data[i] = x0 + h;
			const double fp = f(params).item();
			data[i] = x0 - h;
			const double fm = f(params).item();
			data[i] = x0;
			const double numeric = (fp - fm) / (2.0 * h);
			const double rel = std::abs(analytic[i] - numeric) /
			                   std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
			out.max_rel = std::max(out.max_rel, rel);
			++out.checked;
		}
	}
	return out;
}

// O(n*m) nearest-neighbour Chamfer reference.
inline ChamferResult brute_chamfer(const std::vector<CellIndex>& p, const std::vector<CellIndex>& g, double res) {
	ChamferResult r;
	if (p.empty() || g.empty()) return r;
	auto one_way = [&](const std::vector<CellIndex>& a, const std::vector<CellIndex>& b) {
		double acc = 0.0;
		for (const auto& x : a) {
			double best = std::numeric_limits<double>::infinity();
			for (const auto& y : b) {
				const double dc = x.col - y.col;
				const double dr = x.row - y.row;
				best = std::min(best, std::sqrt(dc * dc + dr * dr));
			}
			acc += best;
		}
		return acc / static_cast<double>(a.size()) * res;
	};
	r.cd_p = one_way(p, g);
	r.cd_l = one_way(g, p);
	r.cd = (p.size() * r.cd_p + g.size() * r.cd_l) / static_cast<double>(p.size() + g.size());
	r.defined = true;
	return r;
}

// Random expression of depth <= `depth` over CHW tensors of shape [C,H,W]
// drawn from the leaves; every op of the engine can appear.
class RandomComposition {
public:
	RandomComposition(std::uint64_t seed, int depth) : rng_(seed), depth_(depth) {
		for (int i = 0; i < 3; ++i) leaves_.push_back(random_param(rng_, {kC, kH, kW}));
		conv_w_ = random_param(rng_, {kC, kC, 3, 3}, -0.5, 0.5);
		conv_b_ = random_param(rng_, {kC}, -0.5, 0.5);
		up_w_ = random_param(rng_, {kC, kC, 2, 2}, -0.5, 0.5);
		mat_ = random_param(rng_, {kW, kW}, -0.7, 0.7);
		weights_ = random_param(rng_, {kC, kH, kW});
		std::vector<int> idx(kC * kH * kW);
		std::uniform_int_distribution<int> pick(-1, static_cast<int>(idx.size()) - 1);
		for (auto& i : idx) i = pick(rng_);
		index_ = std::make_shared<const std::vector<int>>(std::move(idx));
		plan_ = draw(depth_);
	}

	[[nodiscard]] std::vector<DTensor> params() const {
		std::vector<DTensor> p = leaves_;
		p.push_back(conv_w_);
		p.push_back(conv_b_);
		p.push_back(up_w_);
		p.push_back(mat_);
		return p;
	}

	// Scalar loss: weighted sum of the expression.
	[[nodiscard]] DTensor operator()(const std::vector<DTensor>& p) const {
		std::size_t pos = 0;
		return ad::sum(ad::mul(eval(p, pos), ad::stop_gradient(weights_)));
	}

	[[nodiscard]] std::string describe() const {
		std::string out;
		for (int op : plan_) out += std::to_string(op) + " ";
		return out;
	}

private:
	static constexpr std::size_t kC = 2, kH = 4, kW = 4;
	enum Op {
		Leaf0, Leaf1, Leaf2, Add, Sub, Mul, Relu, Sigmoid, Affine, Scale, Softmax, LogSoftmax, LogClamped,
		Reshape, Gather, Matmul, Conv, ConvStride, Mean, OpCount
	};

	// Prefix encoding of the expression tree.
	std::vector<int> draw(int depth) {
		std::vector<int> out;
		std::uniform_int_distribution<int> leaf(Leaf0, Leaf2), op(Add, OpCount - 1);
		std::function<void(int)> rec = [&](int d) {
			if (d == 0) {
				out.push_back(leaf(rng_));
				return;
			}
			const int o = op(rng_);
			out.push_back(o);
			rec(d - 1);
			if (o == Add || o == Sub || o == Mul) rec(std::uniform_int_distribution<int>(0, d - 1)(rng_));
		};
		rec(depth);
		return out;
	}

	DTensor eval(const std::vector<DTensor>& p, std::size_t& pos) const {
		const int o = plan_.at(pos++);
		switch (o) {
		case Leaf0:
		case Leaf1:
		case Leaf2: return p[static_cast<std::size_t>(o)];
		case Add: { auto a = eval(p, pos); return ad::add(a, eval(p, pos)); }
		case Sub: { auto a = eval(p, pos); return ad::sub(a, eval(p, pos)); }
		case Mul: { auto a = eval(p, pos); return ad::mul(a, eval(p, pos)); }
		case Relu: return ad::relu(ad::affine(eval(p, pos), 1.0, 0.05));
		case Sigmoid: return ad::sigmoid(eval(p, pos));
		case Affine: return ad::affine(eval(p, pos), -0.7, 0.3);
		case Scale: return ad::scale(eval(p, pos), 1.3);
		case Softmax: return ad::softmax_channel(eval(p, pos));
		case LogSoftmax: return ad::log_softmax_channel(eval(p, pos));
		case LogClamped: return ad::log_clamped(ad::sigmoid(eval(p, pos)), 1e-7, 1.0 - 1e-7);
		case Reshape: return ad::reshape(ad::reshape(eval(p, pos), {kC * kH, kW}), {kC, kH, kW});
		case Gather: return ad::gather(eval(p, pos), index_, {kC, kH, kW});
		case Matmul:
			return ad::reshape(ad::matmul(ad::reshape(eval(p, pos), {kC * kH, kW}), p[6]), {kC, kH, kW});
		case Conv: return ad::conv2d(eval(p, pos), p[3], p[4], 1);
		case ConvStride: return ad::conv_transpose2d(ad::conv2d(eval(p, pos), p[3], p[4], 2), p[5], p[4]);
		case Mean: {
			auto a = eval(p, pos);
			return ad::add(a, ad::gather(ad::mean(a), broadcast_, {kC, kH, kW}));
		}
		default: break;
		}
		throw std::logic_error("bad op");
	}

	std::mt19937_64 rng_;
	int depth_;
	std::vector<DTensor> leaves_;
	DTensor conv_w_, conv_b_, up_w_, mat_, weights_;
	std::shared_ptr<const std::vector<int>> index_;
	std::shared_ptr<const std::vector<int>> broadcast_ =
	    std::make_shared<const std::vector<int>>(kC * kH * kW, 0);
	std::vector<int> plan_;
};

inline double brute_iou(const SemanticGrid& a, const SemanticGrid& b, ClassId c) {
	long inter = 0, uni = 0;
	for (int r = 0; r < a.height; ++r) {
		for (int k = 0; k < a.width; ++k) {
			const ClassId x = a.at(k, r), y = b.at(k, r);
			if (x == classes::kVoid || y == classes::kVoid) continue;
			if (x == c && y == c) ++inter;
			if (x == c || y == c) ++uni;
		}
	}
	return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline SemanticGrid random_grid(std::mt19937_64& rng, int w, int h, double void_p = 0.1) {
	SemanticGrid g(w, h, classes::kBackground);
	std::uniform_real_distribution<double> u(0.0, 1.0);
	std::uniform_int_distribution<int> cls(0, classes::kCount - 1);
	for (auto& c : g.data) c = u(rng) < void_p ? classes::kVoid : static_cast<ClassId>(cls(rng));
	return g;
}

} // namespace bimapper::testing

#endif
