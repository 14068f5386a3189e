#ifndef BIMAPPER_AUTODIFF_HPP
#define BIMAPPER_AUTODIFF_HPP

// Dense tensors with define-by-run reverse-mode differentiation.
//
// Every op returns a new Tensor. When at least one input requires a gradient
// the result keeps its inputs alive and records a backward closure; otherwise
// it is a plain constant. backward() sorts the reachable graph into a Tape
// and runs the closures in reverse topological order, each exactly once.
//
// Image-like tensors are laid out CHW without a batch dimension.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "bimapper/error.hpp"

namespace bimapper::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
	return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
	std::string out = "[";
	for (std::size_t i = 0; i < s.size(); ++i) {
		out += (i ? "," : "") + std::to_string(s[i]);
	}
	return out + "]";
}

template <class T>
struct Node {
	Shape shape;
	std::vector<T> value;
	std::vector<T> grad;
	bool requires_grad = false;
	const char* op = "leaf";
	std::vector<std::shared_ptr<Node>> parents;
	std::function<void(Node&)> backward;

	void ensure_grad() {
		if (grad.size() != value.size()) grad.assign(value.size(), T(0));
	}
};

template <class T>
class Tensor {
public:
	Tensor() = default;
	explicit Tensor(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

	static Tensor constant(Shape shape, std::vector<T> values) {
		if (numel(shape) != values.size()) {
			throw ShapeMismatch("shape " + to_string(shape) + " holds " +
			                    std::to_string(numel(shape)) + " values, got " +
			                    std::to_string(values.size()));
		}
		auto n = std::make_shared<Node<T>>();
		n->shape = std::move(shape);
		n->value = std::move(values);
		return Tensor(std::move(n));
	}

	static Tensor zeros(Shape shape) {
		const std::size_t n = numel(shape);
		return constant(std::move(shape), std::vector<T>(n, T(0)));
	}

	static Tensor scalar(T v) { return constant({1}, {v}); }

	static Tensor parameter(Shape shape, std::vector<T> values) {
		Tensor t = constant(std::move(shape), std::move(values));
		t.n_->requires_grad = true;
		t.n_->ensure_grad();
		return t;
	}

	[[nodiscard]] bool defined() const { return n_ != nullptr; }
	[[nodiscard]] const Shape& shape() const { return n_->shape; }
	[[nodiscard]] std::size_t size() const { return n_->value.size(); }
	[[nodiscard]] std::size_t dim(std::size_t i) const { return n_->shape.at(i); }
	[[nodiscard]] bool requires_grad() const { return n_->requires_grad; }
	[[nodiscard]] std::span<const T> values() const { return n_->value; }
	// Mutable storage, for optimizers and initialisers.
	[[nodiscard]] std::span<T> data() { return n_->value; }
	[[nodiscard]] std::span<const T> grad() const { return n_->grad; }
	[[nodiscard]] std::span<T> mutable_grad() { return n_->grad; }
	[[nodiscard]] T item() const {
		if (size() != 1) throw ShapeMismatch("item() on tensor of shape " + to_string(shape()));
		return n_->value[0];
	}
	[[nodiscard]] T operator[](std::size_t i) const { return n_->value[i]; }

	void zero_grad() {
		if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), T(0));
	}

	[[nodiscard]] Node<T>* node() const { return n_.get(); }
	[[nodiscard]] const std::shared_ptr<Node<T>>& node_ptr() const { return n_; }

private:
	std::shared_ptr<Node<T>> n_;
};

// Ordered backward records for the graph reachable from a root.
template <class T>
class Tape {
public:
	explicit Tape(const Tensor<T>& root) : root_(root) {
		std::unordered_set<Node<T>*> seen;
		// iterative post-order DFS
		std::vector<std::pair<Node<T>*, std::size_t>> stack;
		if (root.requires_grad()) {
			stack.push_back({root.node(), 0});
			seen.insert(root.node());
		}
		while (!stack.empty()) {
			auto& [node, next] = stack.back();
			if (next < node->parents.size()) {
				Node<T>* p = node->parents[next++].get();
				if (p->requires_grad && seen.insert(p).second) {
					stack.push_back({p, 0});
				}
			} else {
				order_.push_back(node);
				stack.pop_back();
			}
		}
	}

	[[nodiscard]] std::span<Node<T>* const> nodes() const { return order_; }
	[[nodiscard]] std::size_t size() const { return order_.size(); }

	void backward() {
		if (root_.size() != 1) {
			throw NonScalarLoss("loss has shape " + to_string(root_.shape()));
		}
		if (order_.empty()) return;
		Node<T>* root = root_.node();
		root->ensure_grad();
		root->grad[0] += T(1);
		for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
			Node<T>* n = *it;
			if (n->backward) n->backward(*n);
		}
	}

private:
	Tensor<T> root_;
	std::vector<Node<T>*> order_;
};

template <class T>
void backward(const Tensor<T>& loss) {
	if (loss.size() != 1) {
		throw NonScalarLoss("loss has shape " + to_string(loss.shape()));
	}
	Tape<T>(loss).backward();
}

namespace detail {

template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::initializer_list<Tensor<T>> inputs,
                      const char* op, std::function<void(Node<T>&)> bw) {
	auto n = std::make_shared<Node<T>>();
	n->shape = std::move(shape);
	n->value = std::move(value);
	n->op = op;
	bool any = false;
	for (const auto& in : inputs) any = any || in.requires_grad();
	if (any) {
		n->requires_grad = true;
		for (const auto& in : inputs) n->parents.push_back(in.node_ptr());
		n->backward = std::move(bw);
	}
	return Tensor<T>(std::move(n));
}

template <class T>
std::vector<T>* grad_of(Node<T>& self, std::size_t i) {
	Node<T>* p = self.parents[i].get();
	if (!p->requires_grad) return nullptr;
	p->ensure_grad();
	return &p->grad;
}

template <class T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
	if (a.shape() != b.shape()) {
		throw ShapeMismatch(std::string(op) + ": " + to_string(a.shape()) + " vs " + to_string(b.shape()));
	}
}

template <class T>
void require_rank(const Tensor<T>& a, std::size_t rank, const char* op) {
	if (a.shape().size() != rank) {
		throw ShapeMismatch(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
		                    to_string(a.shape()));
	}
}

} // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
	detail::require_same(a, b, "add");
	std::vector<T> v(a.size());
	for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + b[i];
	return detail::make_result<T>(a.shape(), std::move(v), {a, b}, "add", [](Node<T>& self) {
		for (std::size_t k = 0; k < 2; ++k) {
			if (auto* g = detail::grad_of(self, k)) {
				for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
			}
		}
	});
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
	detail::require_same(a, b, "sub");
	std::vector<T> v(a.size());
	for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] - b[i];
	return detail::make_result<T>(a.shape(), std::move(v), {a, b}, "sub", [](Node<T>& self) {
		if (auto* g = detail::grad_of(self, 0)) {
			for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
		}
		if (auto* g = detail::grad_of(self, 1)) {
			for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
		}
	});
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
	detail::require_same(a, b, "mul");
	std::vector<T> v(a.size());
	for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * b[i];
	return detail::make_result<T>(a.shape(), std::move(v), {a, b}, "mul", [](Node<T>& self) {
		const auto& av = self.parents[0]->value;
		const auto& bv = self.parents[1]->value;
		if (auto* g = detail::grad_of(self, 0)) {
			for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
		}
		if (auto* g = detail::grad_of(self, 1)) {
			for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
		}
	});
}

// s * a + b for scalars s, b.
template <class T>
Tensor<T> affine(const Tensor<T>& a, T s, T b = T(0)) {
	std::vector<T> v(a.size());
	for (std::size_t i = 0; i < v.size(); ++i) v[i] = s * a[i] + b;
	return detail::make_result<T>(a.shape(), std::move(v), {a}, "affine", [s](Node<T>& self) {
		if (auto* g = detail::grad_of(self, 0)) {
			for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += s * self.grad[i];
		}
	});
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
	return affine(a, s, T(0));
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
	std::vector<T> v(a.size());
	for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] > T(0) ? a[i] : T(0);
	return detail::make_result<T>(a.shape(), std::move(v), {a}, "relu", [](Node<T>& self) {
		const auto& av = self.parents[0]->value;
		if (auto* g = detail::grad_of(self, 0)) {
			for (std::size_t i = 0; i < g->size(); ++i) {
				if (av[i] > T(0)) (*g)[i] += self.grad[i];
			}
		}
	});
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
	std::vector<T> v(a.size());
	for (std::size_t i = 0; i < v.size(); ++i) {
		const T x = a[i];
		v[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
	}
	return detail::make_result<T>(a.shape(), std::move(v), {a}, "sigmoid", [](Node<T>& self) {
		if (auto* g = detail::grad_of(self, 0)) {
			for (std::size_t i = 0; i < g->size(); ++i) {
				const T s = self.value[i];
				(*g)[i] += self.grad[i] * s * (T(1) - s);
			}
		}
	});
}

// log(clamp(a, lo, hi)); the gradient is zero where the clamp is active.
template <class T>
Tensor<T> log_clamped(const Tensor<T>& a, T lo, T hi) {
	std::vector<T> v(a.size());
	for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::log(std::clamp(a[i], lo, hi));
	return detail::make_result<T>(a.shape(), std::move(v), {a}, "log_clamped", [lo, hi](Node<T>& self) {
		const auto& av = self.parents[0]->value;
		if (auto* g = detail::grad_of(self, 0)) {
			for (std::size_t i = 0; i < g->size(); ++i) {
				if (av[i] > lo && av[i] < hi) (*g)[i] += self.grad[i] / av[i];
			}
		}
	});
}

template <class T>
Tensor<T> stop_gradient(const Tensor<T>& a) {
	return Tensor<T>::constant(a.shape(), std::vector<T>(a.values().begin(), a.values().end()));
}

// ------------------------------------------------------------------ reductions

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
	T acc = T(0);
	for (T x : a.values()) acc += x;
	return detail::make_result<T>({1}, {acc}, {a}, "sum", [](Node<T>& self) {
		if (auto* g = detail::grad_of(self, 0)) {
			const T d = self.grad[0];
			for (auto& x : *g) x += d;
		}
	});
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
	return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

// ------------------------------------------------------------------- structure

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
	if (numel(shape) != a.size()) {
		throw ShapeMismatch("reshape " + to_string(a.shape()) + " -> " + to_string(shape));
	}
	std::vector<T> v(a.values().begin(), a.values().end());
	return detail::make_result<T>(std::move(shape), std::move(v), {a}, "reshape", [](Node<T>& self) {
		if (auto* g = detail::grad_of(self, 0)) {
			for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
		}
	});
}

// out[i] = a[index[i]], or 0 where index[i] < 0.
template <class T>
Tensor<T> gather(const Tensor<T>& a, std::shared_ptr<const std::vector<int>> index, Shape shape) {
	if (numel(shape) != index->size()) {
		throw ShapeMismatch("gather index of " + std::to_string(index->size()) + " entries vs shape " +
		                    to_string(shape));
	}
	std::vector<T> v(index->size(), T(0));
	for (std::size_t i = 0; i < v.size(); ++i) {
		const int j = (*index)[i];
		if (j >= 0) {
			if (static_cast<std::size_t>(j) >= a.size()) {
				throw ShapeMismatch("gather index " + std::to_string(j) + " out of range for " +
				                    to_string(a.shape()));
			}
			v[i] = a[static_cast<std::size_t>(j)];
		}
	}
	return detail::make_result<T>(std::move(shape), std::move(v), {a}, "gather", [index](Node<T>& self) {
		if (auto* g = detail::grad_of(self, 0)) {
			for (std::size_t i = 0; i < index->size(); ++i) {
				const int j = (*index)[i];
				if (j >= 0) (*g)[static_cast<std::size_t>(j)] += self.grad[i];
			}
		}
	});
}

// ---------------------------------------------------------------------- linear

// [m,k] x [k,n] -> [m,n]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
	detail::require_rank(a, 2, "matmul");
	detail::require_rank(b, 2, "matmul");
	const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
	if (b.dim(0) != k) {
		throw ShapeMismatch("matmul: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
	}
	std::vector<T> v(m * n, T(0));
	const T* av = a.values().data();
	const T* bv = b.values().data();
	for (std::size_t i = 0; i < m; ++i) {
		T* out = v.data() + i * n;
		for (std::size_t p = 0; p < k; ++p) {
			const T x = av[i * k + p];
			if (x == T(0)) continue;
			const T* brow = bv + p * n;
			for (std::size_t j = 0; j < n; ++j) out[j] += x * brow[j];
		}
	}
	return detail::make_result<T>({m, n}, std::move(v), {a, b}, "matmul", [m, k, n](Node<T>& self) {
		const T* av = self.parents[0]->value.data();
		const T* bv = self.parents[1]->value.data();
		const T* d = self.grad.data();
		if (auto* g = detail::grad_of(self, 0)) {
			for (std::size_t i = 0; i < m; ++i) {
				for (std::size_t p = 0; p < k; ++p) {
					const T* brow = bv + p * n;
					const T* drow = d + i * n;
					T acc = T(0);
					for (std::size_t j = 0; j < n; ++j) acc += drow[j] * brow[j];
					(*g)[i * k + p] += acc;
				}
			}
		}
		if (auto* g = detail::grad_of(self, 1)) {
			for (std::size_t i = 0; i < m; ++i) {
				for (std::size_t p = 0; p < k; ++p) {
					const T x = av[i * k + p];
					if (x == T(0)) continue;
					T* grow = g->data() + p * n;
					const T* drow = d + i * n;
					for (std::size_t j = 0; j < n; ++j) grow[j] += x * drow[j];
				}
			}
		}
	});
}

// ------------------------------------------------------------------- channels

// Softmax over dim 0 of a [C,H,W] tensor.
template <class T>
Tensor<T> softmax_channel(const Tensor<T>& a) {
	detail::require_rank(a, 3, "softmax_channel");
	const std::size_t c = a.dim(0), hw = a.dim(1) * a.dim(2);
	std::vector<T> v(a.size());
	for (std::size_t p = 0; p < hw; ++p) {
		T mx = a[p];
		for (std::size_t i = 1; i < c; ++i) mx = std::max(mx, a[i * hw + p]);
		T z = T(0);
		for (std::size_t i = 0; i < c; ++i) {
			v[i * hw + p] = std::exp(a[i * hw + p] - mx);
			z += v[i * hw + p];
		}
		for (std::size_t i = 0; i < c; ++i) v[i * hw + p] /= z;
	}
	return detail::make_result<T>(a.shape(), std::move(v), {a}, "softmax_channel", [c, hw](Node<T>& self) {
		if (auto* g = detail::grad_of(self, 0)) {
			for (std::size_t p = 0; p < hw; ++p) {
				T dot = T(0);
				for (std::size_t i = 0; i < c; ++i) dot += self.grad[i * hw + p] * self.value[i * hw + p];
				for (std::size_t i = 0; i < c; ++i) {
					(*g)[i * hw + p] += self.value[i * hw + p] * (self.grad[i * hw + p] - dot);
				}
			}
		}
	});
}

template <class T>
Tensor<T> log_softmax_channel(const Tensor<T>& a) {
	detail::require_rank(a, 3, "log_softmax_channel");
	const std::size_t c = a.dim(0), hw = a.dim(1) * a.dim(2);
	std::vector<T> v(a.size());
	for (std::size_t p = 0; p < hw; ++p) {
		T mx = a[p];
		for (std::size_t i = 1; i < c; ++i) mx = std::max(mx, a[i * hw + p]);
		T z = T(0);
		for (std::size_t i = 0; i < c; ++i) z += std::exp(a[i * hw + p] - mx);
		const T lz = mx + std::log(z);
		for (std::size_t i = 0; i < c; ++i) v[i * hw + p] = a[i * hw + p] - lz;
	}
	return detail::make_result<T>(a.shape(), std::move(v), {a}, "log_softmax_channel", [c, hw](Node<T>& self) {
		if (auto* g = detail::grad_of(self, 0)) {
			for (std::size_t p = 0; p < hw; ++p) {
				T total = T(0);
				for (std::size_t i = 0; i < c; ++i) total += self.grad[i * hw + p];
				for (std::size_t i = 0; i < c; ++i) {
					(*g)[i * hw + p] += self.grad[i * hw + p] - std::exp(self.value[i * hw + p]) * total;
				}
			}
		}
	});
}

// ------------------------------------------------------------------ convolution

// x [Ci,H,W], w [Co,Ci,k,k], b [Co]; zero padding k/2 and the given stride.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride = 1) {
	detail::require_rank(x, 3, "conv2d");
	detail::require_rank(w, 4, "conv2d");
	const std::size_t ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
	const std::size_t co = w.dim(0), k = w.dim(2);
	if (w.dim(1) != ci || w.dim(3) != k || b.shape() != Shape{co} || stride == 0 || k % 2 == 0) {
		throw ShapeMismatch("conv2d: input " + to_string(x.shape()) + ", weight " + to_string(w.shape()) +
		                    ", bias " + to_string(b.shape()));
	}
	const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
	const std::size_t ho = (h + 2 * (k / 2) - k) / stride + 1;
	const std::size_t wo = (wd + 2 * (k / 2) - k) / stride + 1;
	const std::size_t kdim = ci * k * k, np = ho * wo;

	auto cols = std::make_shared<std::vector<T>>(kdim * np, T(0));
	const T* xv = x.values().data();
	for (std::size_t c = 0; c < ci; ++c) {
		for (std::size_t ky = 0; ky < k; ++ky) {
			for (std::size_t kx = 0; kx < k; ++kx) {
				T* row = cols->data() + ((c * k + ky) * k + kx) * np;
				for (std::size_t oy = 0; oy < ho; ++oy) {
					const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - pad;
					if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
					for (std::size_t ox = 0; ox < wo; ++ox) {
						const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - pad;
						if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
						row[oy * wo + ox] = xv[(c * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix)];
					}
				}
			}
		}
	}
	std::vector<T> v(co * np);
	const T* wv = w.values().data();
	for (std::size_t o = 0; o < co; ++o) {
		T* out = v.data() + o * np;
		std::fill(out, out + np, b[o]);
		for (std::size_t r = 0; r < kdim; ++r) {
			const T wr = wv[o * kdim + r];
			const T* crow = cols->data() + r * np;
			for (std::size_t p = 0; p < np; ++p) out[p] += wr * crow[p];
		}
	}
	return detail::make_result<T>({co, ho, wo}, std::move(v), {x, w, b}, "conv2d",
	    [=](Node<T>& self) {
		    const T* d = self.grad.data();
		    if (auto* g = detail::grad_of(self, 2)) {
			    for (std::size_t o = 0; o < co; ++o) {
				    T acc = T(0);
				    for (std::size_t p = 0; p < np; ++p) acc += d[o * np + p];
				    (*g)[o] += acc;
			    }
		    }
		    if (auto* g = detail::grad_of(self, 1)) {
			    for (std::size_t o = 0; o < co; ++o) {
				    const T* drow = d + o * np;
				    for (std::size_t r = 0; r < kdim; ++r) {
					    const T* crow = cols->data() + r * np;
					    T acc = T(0);
					    for (std::size_t p = 0; p < np; ++p) acc += drow[p] * crow[p];
					    (*g)[o * kdim + r] += acc;
				    }
			    }
		    }
		    if (auto* g = detail::grad_of(self, 0)) {
			    const T* wv = self.parents[1]->value.data();
			    std::vector<T> dcols(kdim * np, T(0));
			    for (std::size_t o = 0; o < co; ++o) {
				    const T* drow = d + o * np;
				    for (std::size_t r = 0; r < kdim; ++r) {
					    const T wr = wv[o * kdim + r];
					    T* dc = dcols.data() + r * np;
					    for (std::size_t p = 0; p < np; ++p) dc[p] += wr * drow[p];
				    }
			    }
			    for (std::size_t c = 0; c < ci; ++c) {
				    for (std::size_t ky = 0; ky < k; ++ky) {
					    for (std::size_t kx = 0; kx < k; ++kx) {
						    const T* row = dcols.data() + ((c * k + ky) * k + kx) * np;
						    for (std::size_t oy = 0; oy < ho; ++oy) {
							    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - pad;
							    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
							    for (std::size_t ox = 0; ox < wo; ++ox) {
								    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - pad;
								    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
								    (*g)[(c * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix)] +=
								        row[oy * wo + ox];
							    }
						    }
					    }
				    }
			    }
		    }
	    });
}

// 2x upsampling transposed convolution: x [Ci,H,W], w [Ci,Co,2,2], b [Co]
// -> [Co,2H,2W]. Each input cell scatters into its own 2x2 output block.
template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
	detail::require_rank(x, 3, "conv_transpose2d");
	detail::require_rank(w, 4, "conv_transpose2d");
	const std::size_t ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
	const std::size_t co = w.dim(1);
	if (w.dim(0) != ci || w.dim(2) != 2 || w.dim(3) != 2 || b.shape() != Shape{co}) {
		throw ShapeMismatch("conv_transpose2d: input " + to_string(x.shape()) + ", weight " +
		                    to_string(w.shape()) + ", bias " + to_string(b.shape()));
	}
	const std::size_t ho = 2 * h, wo = 2 * wd;
	std::vector<T> v(co * ho * wo);
	for (std::size_t o = 0; o < co; ++o) {
		std::fill(v.begin() + static_cast<std::ptrdiff_t>(o * ho * wo),
		          v.begin() + static_cast<std::ptrdiff_t>((o + 1) * ho * wo), b[o]);
	}
	const T* xv = x.values().data();
	const T* wv = w.values().data();
	for (std::size_t c = 0; c < ci; ++c) {
		for (std::size_t o = 0; o < co; ++o) {
			for (std::size_t dy = 0; dy < 2; ++dy) {
				for (std::size_t dx = 0; dx < 2; ++dx) {
					const T wt = wv[((c * co + o) * 2 + dy) * 2 + dx];
					for (std::size_t iy = 0; iy < h; ++iy) {
						T* out = v.data() + (o * ho + 2 * iy + dy) * wo + dx;
						const T* in = xv + (c * h + iy) * wd;
						for (std::size_t ix = 0; ix < wd; ++ix) out[2 * ix] += wt * in[ix];
					}
				}
			}
		}
	}
	return detail::make_result<T>({co, ho, wo}, std::move(v), {x, w, b}, "conv_transpose2d",
	    [=](Node<T>& self) {
		    const T* d = self.grad.data();
		    const T* xv = self.parents[0]->value.data();
		    const T* wv = self.parents[1]->value.data();
		    if (auto* g = detail::grad_of(self, 2)) {
			    for (std::size_t o = 0; o < co; ++o) {
				    T acc = T(0);
				    for (std::size_t p = 0; p < ho * wo; ++p) acc += d[o * ho * wo + p];
				    (*g)[o] += acc;
			    }
		    }
		    auto* gw = detail::grad_of(self, 1);
		    auto* gx = detail::grad_of(self, 0);
		    for (std::size_t c = 0; c < ci; ++c) {
			    for (std::size_t o = 0; o < co; ++o) {
				    for (std::size_t dy = 0; dy < 2; ++dy) {
					    for (std::size_t dx = 0; dx < 2; ++dx) {
						    const std::size_t widx = ((c * co + o) * 2 + dy) * 2 + dx;
						    const T wt = wv[widx];
						    T acc = T(0);
						    for (std::size_t iy = 0; iy < h; ++iy) {
							    const T* dout = d + (o * ho + 2 * iy + dy) * wo + dx;
							    const T* in = xv + (c * h + iy) * wd;
							    if (gx) {
								    T* gin = gx->data() + (c * h + iy) * wd;
								    for (std::size_t ix = 0; ix < wd; ++ix) gin[ix] += wt * dout[2 * ix];
							    }
							    for (std::size_t ix = 0; ix < wd; ++ix) acc += in[ix] * dout[2 * ix];
						    }
						    if (gw) (*gw)[widx] += acc;
					    }
				    }
			    }
		    }
	    });
}

} // namespace bimapper::ad

#endif
