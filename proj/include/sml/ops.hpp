#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "sml/errors.hpp"
#include "sml/tape.hpp"
#include "sml/tensor.hpp"

// Differentiable primitives. Each op computes the forward value eagerly and
// registers a closure that routes the output grad to its parents. Closures
// capture parent Node pointers plus whatever forward tensors the backward
// formula needs, by value.
namespace sml::ops {

template <typename T>
void check_same_tape(Var<T> a, Var<T> b) {
    if (a.tape() != b.tape()) throw ArgumentError("op arguments live on different tapes");
}

// ---- elementwise ----

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    check_same_tape(a, b);
    if (!a.value().same_shape(b.value()))
        throw ArgumentError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    Node<T>* an = a.node();
    Node<T>* bn = b.node();
    Var<T> y = a.tape()->record(std::move(out), an->needs_grad || bn->needs_grad, nullptr);
    Node<T>* yn = y.node();
    if (yn->needs_grad) {
        yn->backprop = [an, bn, yn] {
            if (an->needs_grad) accumulate_grad(an, yn->grad);
            if (bn->needs_grad) accumulate_grad(bn, yn->grad);
        };
    }
    return y;
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    check_same_tape(a, b);
    if (!a.value().same_shape(b.value()))
        throw ArgumentError("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
    Node<T>* an = a.node();
    Node<T>* bn = b.node();
    Var<T> y = a.tape()->record(std::move(out), an->needs_grad || bn->needs_grad, nullptr);
    Node<T>* yn = y.node();
    if (yn->needs_grad) {
        yn->backprop = [an, bn, yn] {
            if (an->needs_grad) accumulate_grad(an, yn->grad);
            if (bn->needs_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < yn->grad.size(); ++i) bn->grad[i] -= yn->grad[i];
            }
        };
    }
    return y;
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    check_same_tape(a, b);
    if (!a.value().same_shape(b.value()))
        throw ArgumentError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    Node<T>* an = a.node();
    Node<T>* bn = b.node();
    Var<T> y = a.tape()->record(std::move(out), an->needs_grad || bn->needs_grad, nullptr);
    Node<T>* yn = y.node();
    if (yn->needs_grad) {
        Tensor<T> av = a.value();
        Tensor<T> bv = b.value();
        yn->backprop = [an, bn, yn, av = std::move(av), bv = std::move(bv)] {
            if (an->needs_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < yn->grad.size(); ++i) an->grad[i] += yn->grad[i] * bv[i];
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < yn->grad.size(); ++i) bn->grad[i] += yn->grad[i] * av[i];
            }
        };
    }
    return y;
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * c;
    Node<T>* an = a.node();
    Var<T> y = a.tape()->record(std::move(out), an->needs_grad, nullptr);
    Node<T>* yn = y.node();
    if (yn->needs_grad) {
        yn->backprop = [an, yn, c] {
            an->ensure_grad();
            for (std::size_t i = 0; i < yn->grad.size(); ++i) an->grad[i] += yn->grad[i] * c;
        };
    }
    return y;
}

template <typename T>
Var<T> add_scalar(Var<T> a, T c) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + c;
    Node<T>* an = a.node();
    Var<T> y = a.tape()->record(std::move(out), an->needs_grad, nullptr);
    Node<T>* yn = y.node();
    if (yn->needs_grad) {
        yn->backprop = [an, yn] { accumulate_grad(an, yn->grad); };
    }
    return y;
}

// ---- activations ----

template <typename T>
Var<T> gelu(Var<T> a) {
    // tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi)(x + 0.044715 x^3)))
    const T k = static_cast<T>(0.7978845608028653979);  // sqrt(2/pi)
    const T c3 = static_cast<T>(0.044715);
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        T x = a.value()[i];
        out[i] = T(0.5) * x * (T(1) + std::tanh(k * (x + c3 * x * x * x)));
    }
    Node<T>* an = a.node();
    Var<T> y = a.tape()->record(std::move(out), an->needs_grad, nullptr);
    Node<T>* yn = y.node();
    if (yn->needs_grad) {
        Tensor<T> xv = a.value();
        yn->backprop = [an, yn, xv = std::move(xv), k, c3] {
            an->ensure_grad();
            for (std::size_t i = 0; i < yn->grad.size(); ++i) {
                T x = xv[i];
                T u = k * (x + c3 * x * x * x);
                T t = std::tanh(u);
                T du = k * (T(1) + T(3) * c3 * x * x);
                T d = T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
                an->grad[i] += yn->grad[i] * d;
            }
        };
    }
    return y;
}

template <typename T>
Var<T> silu(Var<T> a) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        T x = a.value()[i];
        out[i] = x / (T(1) + std::exp(-x));
    }
    Node<T>* an = a.node();
    Var<T> y = a.tape()->record(std::move(out), an->needs_grad, nullptr);
    Node<T>* yn = y.node();
    if (yn->needs_grad) {
        Tensor<T> xv = a.value();
        yn->backprop = [an, yn, xv = std::move(xv)] {
            an->ensure_grad();
            for (std::size_t i = 0; i < yn->grad.size(); ++i) {
                T x = xv[i];
                T s = T(1) / (T(1) + std::exp(-x));
                an->grad[i] += yn->grad[i] * s * (T(1) + x * (T(1) - s));
            }
        };
    }
    return y;
}

// ---- shape movement ----

// out[i] = in[idx[i]]; one permutation op covers every layout shuffle
// (transposes, head split/merge, token<->image). idx must be a bijection.
template <typename T>
Var<T> gather_permute(Var<T> a, Shape out_shape, std::vector<std::size_t> idx) {
    if (idx.size() != shape_numel(out_shape) || idx.size() != a.size())
        throw ArgumentError("gather_permute: index map size mismatch");
    Tensor<T> out(std::move(out_shape));
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = a.value()[idx[i]];
    Node<T>* an = a.node();
    Var<T> y = a.tape()->record(std::move(out), an->needs_grad, nullptr);
    Node<T>* yn = y.node();
    if (yn->needs_grad) {
        yn->backprop = [an, yn, idx = std::move(idx)] {
            an->ensure_grad();
            for (std::size_t i = 0; i < idx.size(); ++i) an->grad[idx[i]] += yn->grad[i];
        };
    }
    return y;
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
    if (shape_numel(shape) != a.size())
        throw ArgumentError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    Tensor<T> out(shape, a.value().vec());
    Node<T>* an = a.node();
    Var<T> y = a.tape()->record(std::move(out), an->needs_grad, nullptr);
    Node<T>* yn = y.node();
    if (yn->needs_grad) {
        yn->backprop = [an, yn] {
            an->ensure_grad();
            for (std::size_t i = 0; i < yn->grad.size(); ++i) an->grad[i] += yn->grad[i];
        };
    }
    return y;
}

// (B, L, C) -> (B, C, s, s) with L = s*s laid out row-major.
template <typename T>
Var<T> seq2img(Var<T> a, std::size_t s) {
    if (a.shape().size() != 3) throw ArgumentError("seq2img: expected rank-3 input");
    std::size_t B = a.shape()[0], L = a.shape()[1], C = a.shape()[2];
    if (L != s * s) throw ArgumentError("seq2img: sequence length is not s*s");
    std::vector<std::size_t> idx(B * C * s * s);
    std::size_t o = 0;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t l = 0; l < L; ++l) idx[o++] = (b * L + l) * C + c;
    return gather_permute(a, Shape{B, C, s, s}, std::move(idx));
}

// (B, C, s, s) -> (B, s*s, C)
template <typename T>
Var<T> img2seq(Var<T> a) {
    if (a.shape().size() != 4) throw ArgumentError("img2seq: expected rank-4 input");
    std::size_t B = a.shape()[0], C = a.shape()[1], s = a.shape()[2];
    if (a.shape()[3] != s) throw ArgumentError("img2seq: spatial dims must be square");
    std::size_t L = s * s;
    std::vector<std::size_t> idx(B * L * C);
    std::size_t o = 0;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t c = 0; c < C; ++c) idx[o++] = (b * C + c) * L + l;
    return gather_permute(a, Shape{B, L, C}, std::move(idx));
}

// (B, L, C) <-> (B, C, L): swap the last two axes of a rank-3 tensor.
template <typename T>
Var<T> transpose_last2(Var<T> a) {
    if (a.shape().size() != 3) throw ArgumentError("transpose_last2: expected rank-3 input");
    std::size_t B = a.shape()[0], M = a.shape()[1], N = a.shape()[2];
    std::vector<std::size_t> idx(B * M * N);
    std::size_t o = 0;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t m = 0; m < M; ++m) idx[o++] = (b * M + m) * N + n;
    return gather_permute(a, Shape{B, N, M}, std::move(idx));
}

// (B, L, D) -> (B*H, L, D/H)
template <typename T>
Var<T> split_heads(Var<T> a, std::size_t heads) {
    if (a.shape().size() != 3) throw ArgumentError("split_heads: expected rank-3 input");
    std::size_t B = a.shape()[0], L = a.shape()[1], D = a.shape()[2];
    if (D % heads != 0) throw ArgumentError("split_heads: width not divisible by head count");
    std::size_t dh = D / heads;
    std::vector<std::size_t> idx(B * L * D);
    std::size_t o = 0;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t l = 0; l < L; ++l)
                for (std::size_t k = 0; k < dh; ++k) idx[o++] = (b * L + l) * D + h * dh + k;
    return gather_permute(a, Shape{B * heads, L, dh}, std::move(idx));
}

// (B*H, L, D/H) -> (B, L, D)
template <typename T>
Var<T> merge_heads(Var<T> a, std::size_t heads) {
    if (a.shape().size() != 3) throw ArgumentError("merge_heads: expected rank-3 input");
    std::size_t BH = a.shape()[0], L = a.shape()[1], dh = a.shape()[2];
    if (BH % heads != 0) throw ArgumentError("merge_heads: batch not divisible by head count");
    std::size_t B = BH / heads, D = heads * dh;
    std::vector<std::size_t> idx(B * L * D);
    std::size_t o = 0;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t k = 0; k < dh; ++k) idx[o++] = ((b * heads + h) * L + l) * dh + k;
    return gather_permute(a, Shape{B, L, D}, std::move(idx));
}

// ---- linear algebra ----

// (m,k) @ (k,n) -> (m,n)
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    check_same_tape(a, b);
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        throw ArgumentError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor<T> out(Shape{m, n});
    const T* A = a.value().data();
    const T* B = b.value().data();
    T* C = out.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            T av = A[i * k + p];
            const T* brow = B + p * n;
            T* crow = C + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    Node<T>* an = a.node();
    Node<T>* bn = b.node();
    Var<T> y = a.tape()->record(std::move(out), an->needs_grad || bn->needs_grad, nullptr);
    Node<T>* yn = y.node();
    if (yn->needs_grad) {
        Tensor<T> av = a.value();
        Tensor<T> bv = b.value();
        yn->backprop = [an, bn, yn, av = std::move(av), bv = std::move(bv), m, k, n] {
            const T* G = yn->grad.data();
            if (an->needs_grad) {
                an->ensure_grad();  // dA = G @ B^T
                T* dA = an->grad.data();
                const T* B = bv.data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        T acc = T(0);
                        const T* grow = G + i * n;
                        const T* brow = B + p * n;
                        for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        dA[i * k + p] += acc;
                    }
            }
            if (bn->needs_grad) {
                bn->ensure_grad();  // dB = A^T @ G
                T* dB = bn->grad.data();
                const T* A = av.data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        T a_ip = A[i * k + p];
                        const T* grow = G + i * n;
                        T* brow = dB + p * n;
                        for (std::size_t j = 0; j < n; ++j) brow[j] += a_ip * grow[j];
                    }
            }
        };
    }
    return y;
}

// (N,m,k) @ (N,k,n) -> (N,m,n)
template <typename T>
Var<T> matmul_batched(Var<T> a, Var<T> b) {
    check_same_tape(a, b);
    if (a.shape().size() != 3 || b.shape().size() != 3 || a.shape()[0] != b.shape()[0] ||
        a.shape()[2] != b.shape()[1])
        throw ArgumentError("matmul_batched: incompatible shapes " + shape_str(a.shape()) + " x " +
                            shape_str(b.shape()));
    std::size_t N = a.shape()[0], m = a.shape()[1], k = a.shape()[2], n = b.shape()[2];
    Tensor<T> out(Shape{N, m, n});
    for (std::size_t q = 0; q < N; ++q) {
        const T* A = a.value().data() + q * m * k;
        const T* B = b.value().data() + q * k * n;
        T* C = out.data() + q * m * n;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
                T av = A[i * k + p];
                const T* brow = B + p * n;
                T* crow = C + i * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
    }
    Node<T>* an = a.node();
    Node<T>* bn = b.node();
    Var<T> y = a.tape()->record(std::move(out), an->needs_grad || bn->needs_grad, nullptr);
    Node<T>* yn = y.node();
    if (yn->needs_grad) {
        Tensor<T> av = a.value();
        Tensor<T> bv = b.value();
        yn->backprop = [an, bn, yn, av = std::move(av), bv = std::move(bv), N, m, k, n] {
            for (std::size_t q = 0; q < N; ++q) {
                const T* G = yn->grad.data() + q * m * n;
                if (an->needs_grad) {
                    an->ensure_grad();
                    T* dA = an->grad.data() + q * m * k;
                    const T* B = bv.data() + q * k * n;
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t p = 0; p < k; ++p) {
                            T acc = T(0);
                            const T* grow = G + i * n;
                            const T* brow = B + p * n;
                            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                            dA[i * k + p] += acc;
                        }
                }
                if (bn->needs_grad) {
                    bn->ensure_grad();
                    T* dB = bn->grad.data() + q * k * n;
                    const T* A = av.data() + q * m * k;
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t p = 0; p < k; ++p) {
                            T a_ip = A[i * k + p];
                            const T* grow = G + i * n;
                            T* brow = dB + p * n;
                            for (std::size_t j = 0; j < n; ++j) brow[j] += a_ip * grow[j];
                        }
                }
            }
        };
    }
    return y;
}

// Broadcast-add a length-n vector across the rows of (..., n).
template <typename T>
Var<T> add_rowvec(Var<T> a, Var<T> v) {
    check_same_tape(a, v);
    if (v.shape().size() != 1 || a.shape().empty() || a.shape().back() != v.shape()[0])
        throw ArgumentError("add_rowvec: vector length must match trailing dim");
    std::size_t n = v.size();
    std::size_t rows = a.size() / n;
    Tensor<T> out(a.shape());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = a.value()[r * n + j] + v.value()[j];
    Node<T>* an = a.node();
    Node<T>* vn = v.node();
    Var<T> y = a.tape()->record(std::move(out), an->needs_grad || vn->needs_grad, nullptr);
    Node<T>* yn = y.node();
    if (yn->needs_grad) {
        yn->backprop = [an, vn, yn, rows, n] {
            if (an->needs_grad) accumulate_grad(an, yn->grad);
            if (vn->needs_grad) {
                vn->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < n; ++j) vn->grad[j] += yn->grad[r * n + j];
            }
        };
    }
    return y;
}

// x @ W^T + b with x (..., in), W (out, in), b (out). Leading dims flattened.
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
    if (w.shape().size() != 2) throw ArgumentError("linear: weight must be rank-2");
    std::size_t in = w.shape()[1], out_f = w.shape()[0];
    if (x.shape().empty() || x.shape().back() != in)
        throw ArgumentError("linear: input trailing dim " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
    Shape orig = x.shape();
    std::size_t rows = x.size() / in;
    Var<T> x2 = reshape(x, Shape{rows, in});
    // (rows,in) @ (in,out): transpose W once on the tape so grads flow back.
    std::vector<std::size_t> idx(in * out_f);
    std::size_t o = 0;
    for (std::size_t i = 0; i < in; ++i)
        for (std::size_t j = 0; j < out_f; ++j) idx[o++] = j * in + i;
    Var<T> wt = gather_permute(w, Shape{in, out_f}, std::move(idx));
    Var<T> y = add_rowvec(matmul(x2, wt), b);
    Shape out_shape = orig;
    out_shape.back() = out_f;
    return reshape(y, std::move(out_shape));
}

// ---- normalization & softmax ----

template <typename T>
Var<T> softmax_lastdim(Var<T> a) {
    if (a.shape().empty()) throw ArgumentError("softmax: scalar input");
    std::size_t n = a.shape().back();
    std::size_t rows = a.size() / n;
    Tensor<T> out(a.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* x = a.value().data() + r * n;
        T* y = out.data() + r * n;
        T mx = x[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < n; ++j) {
            y[j] = std::exp(x[j] - mx);
            sum += y[j];
        }
        for (std::size_t j = 0; j < n; ++j) y[j] /= sum;
    }
    Node<T>* an = a.node();
    Var<T> y = a.tape()->record(std::move(out), an->needs_grad, nullptr);
    Node<T>* yn = y.node();
    if (yn->needs_grad) {
        Tensor<T> yv = yn->value;
        yn->backprop = [an, yn, yv = std::move(yv), rows, n] {
            an->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* p = yv.data() + r * n;
                const T* g = yn->grad.data() + r * n;
                T dot = T(0);
                for (std::size_t j = 0; j < n; ++j) dot += g[j] * p[j];
                T* dx = an->grad.data() + r * n;
                for (std::size_t j = 0; j < n; ++j) dx[j] += p[j] * (g[j] - dot);
            }
        };
    }
    return y;
}

template <typename T>
Var<T> log_softmax_lastdim(Var<T> a) {
    if (a.shape().empty()) throw ArgumentError("log_softmax: scalar input");
    std::size_t n = a.shape().back();
    std::size_t rows = a.size() / n;
    Tensor<T> out(a.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* x = a.value().data() + r * n;
        T* y = out.data() + r * n;
        T mx = x[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < n; ++j) sum += std::exp(x[j] - mx);
        T lse = mx + std::log(sum);
        for (std::size_t j = 0; j < n; ++j) y[j] = x[j] - lse;
    }
    Node<T>* an = a.node();
    Var<T> y = a.tape()->record(std::move(out), an->needs_grad, nullptr);
    Node<T>* yn = y.node();
    if (yn->needs_grad) {
        Tensor<T> yv = yn->value;
        yn->backprop = [an, yn, yv = std::move(yv), rows, n] {
            an->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* ls = yv.data() + r * n;
                const T* g = yn->grad.data() + r * n;
                T gsum = T(0);
                for (std::size_t j = 0; j < n; ++j) gsum += g[j];
                T* dx = an->grad.data() + r * n;
                for (std::size_t j = 0; j < n; ++j) dx[j] += g[j] - std::exp(ls[j]) * gsum;
            }
        };
    }
    return y;
}

// LayerNorm over the trailing dim with affine gamma/beta (biased variance).
template <typename T>
Var<T> layer_norm(Var<T> a, Var<T> gamma, Var<T> beta, T eps = static_cast<T>(1e-5)) {
    check_same_tape(a, gamma);
    check_same_tape(a, beta);
    if (a.shape().empty()) throw ArgumentError("layer_norm: scalar input");
    std::size_t n = a.shape().back();
    if (gamma.size() != n || beta.size() != n)
        throw ArgumentError("layer_norm: gamma/beta length must match trailing dim");
    std::size_t rows = a.size() / n;
    Tensor<T> out(a.shape());
    Tensor<T> xhat(a.shape());
    Tensor<T> inv_std(Shape{rows});
    for (std::size_t r = 0; r < rows; ++r) {
        const T* x = a.value().data() + r * n;
        T mu = T(0);
        for (std::size_t j = 0; j < n; ++j) mu += x[j];
        mu /= static_cast<T>(n);
        T var = T(0);
        for (std::size_t j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= static_cast<T>(n);
        T istd = T(1) / std::sqrt(var + eps);
        inv_std[r] = istd;
        for (std::size_t j = 0; j < n; ++j) {
            T xh = (x[j] - mu) * istd;
            xhat[r * n + j] = xh;
            out[r * n + j] = gamma.value()[j] * xh + beta.value()[j];
        }
    }
    Node<T>* an = a.node();
    Node<T>* gn = gamma.node();
    Node<T>* bn = beta.node();
    bool ng = an->needs_grad || gn->needs_grad || bn->needs_grad;
    Var<T> y = a.tape()->record(std::move(out), ng, nullptr);
    Node<T>* yn = y.node();
    if (yn->needs_grad) {
        Tensor<T> gv = gamma.value();
        yn->backprop = [an, gn, bn, yn, xhat = std::move(xhat), inv_std = std::move(inv_std),
                        gv = std::move(gv), rows, n] {
            for (std::size_t r = 0; r < rows; ++r) {
                const T* g = yn->grad.data() + r * n;
                const T* xh = xhat.data() + r * n;
                if (gn->needs_grad) {
                    gn->ensure_grad();
                    for (std::size_t j = 0; j < n; ++j) gn->grad[j] += g[j] * xh[j];
                }
                if (bn->needs_grad) {
                    bn->ensure_grad();
                    for (std::size_t j = 0; j < n; ++j) bn->grad[j] += g[j];
                }
                if (an->needs_grad) {
                    an->ensure_grad();
                    T m1 = T(0), m2 = T(0);
                    for (std::size_t j = 0; j < n; ++j) {
                        T dxh = g[j] * gv[j];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                    }
                    m1 /= static_cast<T>(n);
                    m2 /= static_cast<T>(n);
                    T* dx = an->grad.data() + r * n;
                    for (std::size_t j = 0; j < n; ++j) {
                        T dxh = g[j] * gv[j];
                        dx[j] += inv_std[r] * (dxh - m1 - xh[j] * m2);
                    }
                }
            }
        };
    }
    return y;
}

// ---- conv / pooling ----

// NCHW conv, stride 1. weight (Cout, Cin, kh, kw), bias (Cout).
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, std::size_t pad) {
    check_same_tape(x, w);
    check_same_tape(x, b);
    if (x.shape().size() != 4 || w.shape().size() != 4)
        throw ArgumentError("conv2d: input and weight must be rank-4");
    std::size_t N = x.shape()[0], Cin = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    std::size_t Cout = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
    if (w.shape()[1] != Cin) throw ArgumentError("conv2d: channel mismatch");
    if (b.size() != Cout) throw ArgumentError("conv2d: bias length mismatch");
    if (H + 2 * pad < kh || W + 2 * pad < kw) throw ArgumentError("conv2d: kernel larger than padded input");
    std::size_t Ho = H + 2 * pad - kh + 1, Wo = W + 2 * pad - kw + 1;
    Tensor<T> out(Shape{N, Cout, Ho, Wo});
    const T* X = x.value().data();
    const T* Wt = w.value().data();
    const T* Bv = b.value().data();
    T* Y = out.data();
    for (std::size_t nn = 0; nn < N; ++nn)
        for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t oh = 0; oh < Ho; ++oh)
                for (std::size_t ow = 0; ow < Wo; ++ow) {
                    T acc = Bv[co];
                    for (std::size_t ci = 0; ci < Cin; ++ci)
                        for (std::size_t i = 0; i < kh; ++i) {
                            std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh + i) - static_cast<std::ptrdiff_t>(pad);
                            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                            for (std::size_t j = 0; j < kw; ++j) {
                                std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow + j) - static_cast<std::ptrdiff_t>(pad);
                                if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                                acc += X[((nn * Cin + ci) * H + ih) * W + iw] *
                                       Wt[((co * Cin + ci) * kh + i) * kw + j];
                            }
                        }
                    Y[((nn * Cout + co) * Ho + oh) * Wo + ow] = acc;
                }
    Node<T>* xn = x.node();
    Node<T>* wn = w.node();
    Node<T>* bnn = b.node();
    bool ng = xn->needs_grad || wn->needs_grad || bnn->needs_grad;
    Var<T> y = x.tape()->record(std::move(out), ng, nullptr);
    Node<T>* yn = y.node();
    if (yn->needs_grad) {
        Tensor<T> xv = x.value();
        Tensor<T> wv = w.value();
        yn->backprop = [xn, wn, bnn, yn, xv = std::move(xv), wv = std::move(wv), N, Cin, H, W, Cout,
                        kh, kw, pad, Ho, Wo] {
            const T* G = yn->grad.data();
            if (bnn->needs_grad) {
                bnn->ensure_grad();
                for (std::size_t nn = 0; nn < N; ++nn)
                    for (std::size_t co = 0; co < Cout; ++co) {
                        T acc = T(0);
                        const T* gp = G + (nn * Cout + co) * Ho * Wo;
                        for (std::size_t i = 0; i < Ho * Wo; ++i) acc += gp[i];
                        bnn->grad[co] += acc;
                    }
            }
            if (wn->needs_grad) wn->ensure_grad();
            if (xn->needs_grad) xn->ensure_grad();
            if (!wn->needs_grad && !xn->needs_grad) return;
            for (std::size_t nn = 0; nn < N; ++nn)
                for (std::size_t co = 0; co < Cout; ++co)
                    for (std::size_t oh = 0; oh < Ho; ++oh)
                        for (std::size_t ow = 0; ow < Wo; ++ow) {
                            T g = G[((nn * Cout + co) * Ho + oh) * Wo + ow];
                            if (g == T(0)) continue;
                            for (std::size_t ci = 0; ci < Cin; ++ci)
                                for (std::size_t i = 0; i < kh; ++i) {
                                    std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh + i) - static_cast<std::ptrdiff_t>(pad);
                                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                                    for (std::size_t j = 0; j < kw; ++j) {
                                        std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow + j) - static_cast<std::ptrdiff_t>(pad);
                                        if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                                        std::size_t xi = ((nn * Cin + ci) * H + ih) * W + iw;
                                        std::size_t wi = ((co * Cin + ci) * kh + i) * kw + j;
                                        if (wn->needs_grad) wn->grad[wi] += g * xv[xi];
                                        if (xn->needs_grad) xn->grad[xi] += g * wv[wi];
                                    }
                                }
                        }
        };
    }
    return y;
}

// BatchNorm over NCHW with per-channel affine. Running stats live outside the
// tape and are only touched in training mode: normalization uses the biased
// batch variance, the running update uses the unbiased one.
template <typename T>
Var<T> batch_norm2d(Var<T> x, Var<T> gamma, Var<T> beta, Tensor<T>& running_mean,
                    Tensor<T>& running_var, bool training, T momentum = static_cast<T>(0.1),
                    T eps = static_cast<T>(1e-5)) {
    check_same_tape(x, gamma);
    check_same_tape(x, beta);
    if (x.shape().size() != 4) throw ArgumentError("batch_norm2d: expected rank-4 input");
    std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    if (gamma.size() != C || beta.size() != C || running_mean.size() != C || running_var.size() != C)
        throw ArgumentError("batch_norm2d: per-channel parameter length mismatch");
    std::size_t m = N * H * W;
    const T* X = x.value().data();
    Tensor<T> out(x.shape());
    Node<T>* xn = x.node();
    Node<T>* gn = gamma.node();
    Node<T>* bn = beta.node();
    bool ng = xn->needs_grad || gn->needs_grad || bn->needs_grad;

    auto idx = [N, C, H, W](std::size_t nn, std::size_t c, std::size_t i) {
        return (nn * C + c) * H * W + i;
    };

    if (training) {
        if (m < 2) throw ArgumentError("batch_norm2d: training mode needs >1 value per channel");
        Tensor<T> mu(Shape{C}), var(Shape{C}), xhat(x.shape());
        for (std::size_t c = 0; c < C; ++c) {
            T s = T(0);
            for (std::size_t nn = 0; nn < N; ++nn)
                for (std::size_t i = 0; i < H * W; ++i) s += X[idx(nn, c, i)];
            mu[c] = s / static_cast<T>(m);
            T v = T(0);
            for (std::size_t nn = 0; nn < N; ++nn)
                for (std::size_t i = 0; i < H * W; ++i) {
                    T d = X[idx(nn, c, i)] - mu[c];
                    v += d * d;
                }
            var[c] = v / static_cast<T>(m);
            T istd = T(1) / std::sqrt(var[c] + eps);
            for (std::size_t nn = 0; nn < N; ++nn)
                for (std::size_t i = 0; i < H * W; ++i) {
                    std::size_t q = idx(nn, c, i);
                    xhat[q] = (X[q] - mu[c]) * istd;
                    out[q] = gamma.value()[c] * xhat[q] + beta.value()[c];
                }
            T unbiased = v / static_cast<T>(m - 1);
            running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * mu[c];
            running_var[c] = (T(1) - momentum) * running_var[c] + momentum * unbiased;
        }
        Var<T> y = x.tape()->record(std::move(out), ng, nullptr);
        Node<T>* yn = y.node();
        if (yn->needs_grad) {
            Tensor<T> gv = gamma.value();
            yn->backprop = [xn, gn, bn, yn, xhat = std::move(xhat), var = std::move(var),
                            gv = std::move(gv), N, C, H, W, m, eps, idx] {
                const T* G = yn->grad.data();
                for (std::size_t c = 0; c < C; ++c) {
                    T sum_g = T(0), sum_gx = T(0);
                    for (std::size_t nn = 0; nn < N; ++nn)
                        for (std::size_t i = 0; i < H * W; ++i) {
                            std::size_t q = idx(nn, c, i);
                            sum_g += G[q];
                            sum_gx += G[q] * xhat[q];
                        }
                    if (gn->needs_grad) {
                        gn->ensure_grad();
                        gn->grad[c] += sum_gx;
                    }
                    if (bn->needs_grad) {
                        bn->ensure_grad();
                        bn->grad[c] += sum_g;
                    }
                    if (xn->needs_grad) {
                        xn->ensure_grad();
                        T istd = T(1) / std::sqrt(var[c] + eps);
                        T k = gv[c] * istd;
                        T mg = sum_g / static_cast<T>(m);
                        T mgx = sum_gx / static_cast<T>(m);
                        for (std::size_t nn = 0; nn < N; ++nn)
                            for (std::size_t i = 0; i < H * W; ++i) {
                                std::size_t q = idx(nn, c, i);
                                xn->grad[q] += k * (G[q] - mg - xhat[q] * mgx);
                            }
                    }
                }
            };
        }
        return y;
    }

    // eval: running stats are constants
    Tensor<T> xhat(x.shape());
    for (std::size_t c = 0; c < C; ++c) {
        T istd = T(1) / std::sqrt(running_var[c] + eps);
        for (std::size_t nn = 0; nn < N; ++nn)
            for (std::size_t i = 0; i < H * W; ++i) {
                std::size_t q = idx(nn, c, i);
                xhat[q] = (X[q] - running_mean[c]) * istd;
                out[q] = gamma.value()[c] * xhat[q] + beta.value()[c];
            }
    }
    Var<T> y = x.tape()->record(std::move(out), ng, nullptr);
    Node<T>* yn = y.node();
    if (yn->needs_grad) {
        Tensor<T> gv = gamma.value();
        Tensor<T> rv = running_var;
        yn->backprop = [xn, gn, bn, yn, xhat = std::move(xhat), gv = std::move(gv),
                        rv = std::move(rv), N, C, H, W, eps, idx] {
            const T* G = yn->grad.data();
            for (std::size_t c = 0; c < C; ++c) {
                T istd = T(1) / std::sqrt(rv[c] + eps);
                for (std::size_t nn = 0; nn < N; ++nn)
                    for (std::size_t i = 0; i < H * W; ++i) {
                        std::size_t q = idx(nn, c, i);
                        if (gn->needs_grad) {
                            gn->ensure_grad();
                            gn->grad[c] += G[q] * xhat[q];
                        }
                        if (bn->needs_grad) {
                            bn->ensure_grad();
                            bn->grad[c] += G[q];
                        }
                        if (xn->needs_grad) {
                            xn->ensure_grad();
                            xn->grad[q] += G[q] * gv[c] * istd;
                        }
                    }
            }
        };
    }
    return y;
}

// (N,C,H,W) -> (N,C): global average pool.
template <typename T>
Var<T> global_avg_pool(Var<T> a) {
    if (a.shape().size() != 4) throw ArgumentError("global_avg_pool: expected rank-4 input");
    std::size_t N = a.shape()[0], C = a.shape()[1], HW = a.shape()[2] * a.shape()[3];
    Tensor<T> out(Shape{N, C});
    for (std::size_t q = 0; q < N * C; ++q) {
        T acc = T(0);
        const T* p = a.value().data() + q * HW;
        for (std::size_t i = 0; i < HW; ++i) acc += p[i];
        out[q] = acc / static_cast<T>(HW);
    }
    Node<T>* an = a.node();
    Var<T> y = a.tape()->record(std::move(out), an->needs_grad, nullptr);
    Node<T>* yn = y.node();
    if (yn->needs_grad) {
        yn->backprop = [an, yn, N, C, HW] {
            an->ensure_grad();
            for (std::size_t q = 0; q < N * C; ++q) {
                T g = yn->grad[q] / static_cast<T>(HW);
                T* dx = an->grad.data() + q * HW;
                for (std::size_t i = 0; i < HW; ++i) dx[i] += g;
            }
        };
    }
    return y;
}

// ---- reductions ----

template <typename T>
Var<T> sum_all(Var<T> a) {
    T acc = T(0);
    for (std::size_t i = 0; i < a.size(); ++i) acc += a.value()[i];
    Node<T>* an = a.node();
    Var<T> y = a.tape()->record(Tensor<T>::scalar(acc), an->needs_grad, nullptr);
    Node<T>* yn = y.node();
    if (yn->needs_grad) {
        yn->backprop = [an, yn] {
            an->ensure_grad();
            T g = yn->grad[0];
            for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
        };
    }
    return y;
}

template <typename T>
Var<T> mean_all(Var<T> a) {
    return scale(sum_all(a), T(1) / static_cast<T>(a.size()));
}

}  // namespace sml::ops
