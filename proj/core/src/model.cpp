#include "convsink/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <vector>

#include "json.hpp"

namespace convsink {

namespace {

constexpr double kNegInf = -1e9;
constexpr double kNormEps = 1e-8;

struct TensorRef {
    std::size_t offset = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t size() const { return rows * cols; }
};

struct LayerRefs {
    TensorRef attn_norm, wq, wk, wv, wo;
    TensorRef ffn_norm, w1, b1, w2, b2;
};

struct ParamLayout {
    TensorRef tok_emb, pos_emb;
    std::vector<LayerRefs> layers;
    TensorRef final_norm, head_w, head_b;
    std::size_t total = 0;
};

ParamLayout make_layout(const ModelConfig& c) {
    ParamLayout lay;
    std::size_t at = 0;
    auto add = [&at](std::size_t r, std::size_t cc) {
        TensorRef ref{at, r, cc};
        at += r * cc;
        return ref;
    };
    lay.tok_emb = add(c.vocab_size, c.d_model);
    lay.pos_emb = add(c.max_seq_len, c.d_model);
    lay.layers.resize(c.n_layers);
    for (auto& l : lay.layers) {
        l.attn_norm = add(1, c.d_model);
        l.wq = add(c.d_model, c.d_model);
        l.wk = add(c.d_model, c.d_model);
        l.wv = add(c.d_model, c.d_model);
        l.wo = add(c.d_model, c.d_model);
        l.ffn_norm = add(1, c.d_model);
        l.w1 = add(c.d_model, c.d_ff);
        l.b1 = add(1, c.d_ff);
        l.w2 = add(c.d_ff, c.d_model);
        l.b2 = add(1, c.d_model);
    }
    lay.final_norm = add(1, c.d_model);
    lay.head_w = add(c.d_model, c.vocab_size);
    lay.head_b = add(1, c.vocab_size);
    lay.total = at;
    return lay;
}

// C[m,n] += A[m,k] * B[k,n]
void matmul_acc(const double* a, const double* b, double* c,
                std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[m,k] += A[m,n] * B^T, with B stored [k,n]
void matmul_bt_acc(const double* a, const double* b, double* c,
                   std::size_t m, std::size_t n, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * n;
        double* ci = c + i * k;
        for (std::size_t j = 0; j < k; ++j) {
            const double* bj = b + j * n;
            double acc = 0.0;
            for (std::size_t p = 0; p < n; ++p) acc += ai[p] * bj[p];
            ci[j] += acc;
        }
    }
}

// C[k,n] += A^T * B, with A stored [m,k], B stored [m,n]
void matmul_at_acc(const double* a, const double* b, double* c,
                   std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        const double* bi = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            double* cp = c + p * n;
            for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

inline double gelu(double x) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    const double u = c * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad(double x) {
    constexpr double c = 0.7978845608028654;
    const double x2 = x * x;
    const double u = c * (x + 0.044715 * x * x2);
    const double t = std::tanh(u);
    const double du = c * (1.0 + 3.0 * 0.044715 * x2);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

// y_i = x_i * g / rms(x), rms = sqrt(mean(x^2) + eps); returns 1/rms per row
void rmsnorm_forward(const Matrix& x, const double* gain, Matrix& y, std::vector<double>& inv_r) {
    inv_r.resize(x.rows);
    for (std::size_t i = 0; i < x.rows; ++i) {
        const double* xi = x.row(i);
        double ms = 0.0;
        for (std::size_t j = 0; j < x.cols; ++j) ms += xi[j] * xi[j];
        ms /= static_cast<double>(x.cols);
        const double ir = 1.0 / std::sqrt(ms + kNormEps);
        inv_r[i] = ir;
        double* yi = y.row(i);
        for (std::size_t j = 0; j < x.cols; ++j) yi[j] = xi[j] * gain[j] * ir;
    }
}

void rmsnorm_backward(const Matrix& x, const double* gain, const std::vector<double>& inv_r,
                      const Matrix& dy, Matrix& dx, double* dgain) {
    const std::size_t d = x.cols;
    for (std::size_t i = 0; i < x.rows; ++i) {
        const double* xi = x.row(i);
        const double* dyi = dy.row(i);
        double* dxi = dx.row(i);
        const double ir = inv_r[i];
        double inner = 0.0;  // sum dy * g * x
        for (std::size_t j = 0; j < d; ++j) inner += dyi[j] * gain[j] * xi[j];
        const double scale = inner * ir * ir * ir / static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
            dxi[j] += dyi[j] * gain[j] * ir - xi[j] * scale;
            dgain[j] += dyi[j] * xi[j] * ir;
        }
    }
}

struct LayerCache {
    Matrix x_in, r1, q, k, v, concat, x_mid, r2, u, g;
    std::vector<double> inv_r1, inv_r2;
    std::vector<Matrix> attn;  // one (N,N) weight matrix per head
};

struct Caches {
    std::vector<LayerCache> layers;
    Matrix x_out, rf, logits;
    std::vector<double> inv_rf;
};

}  // namespace

void ModelConfig::validate() const {
    if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1 || max_seq_len < 1) {
        throw ValidationError("BadModelConfig", "all dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
        throw ValidationError("BadModelConfig", "d_model must be divisible by n_heads");
    }
    if (vocab_size < 4) {
        throw ValidationError("BadModelConfig", "vocab_size must be at least 4");
    }
}

std::string ModelConfig::to_json() const {
    nlohmann::json j;
    j["n_layers"] = n_layers;
    j["n_heads"] = n_heads;
    j["d_model"] = d_model;
    j["d_ff"] = d_ff;
    j["vocab_size"] = vocab_size;
    j["max_seq_len"] = max_seq_len;
    j["seed"] = seed;
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("BadModelConfig", e.what());
    }
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.validate();
    return c;
}

double loss_masked(const Matrix& logits, const TokenSeq& targets,
                   const std::vector<std::size_t>& predict_positions) {
    if (predict_positions.empty()) {
        throw ValidationError("EmptyPredictSet", "need at least one predict position");
    }
    if (targets.size() != logits.rows) {
        throw ValidationError("LengthMismatch", "targets must align with logits rows");
    }
    double total = 0.0;
    for (std::size_t p : predict_positions) {
        if (p < 1 || p >= logits.rows) {
            throw ValidationError("IndexOutOfRange", "predict position " + std::to_string(p));
        }
        const TokenId t = targets[p];
        if (t < 0 || static_cast<std::size_t>(t) >= logits.cols) {
            throw ValidationError("TokenOutOfRange", "target id " + std::to_string(t));
        }
        const double* row = logits.row(p - 1);
        double m = row[0];
        for (std::size_t j = 1; j < logits.cols; ++j) m = std::max(m, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < logits.cols; ++j) z += std::exp(row[j] - m);
        total += m + std::log(z) - row[static_cast<std::size_t>(t)];
    }
    return total / static_cast<double>(predict_positions.size());
}

Matrix loss_masked_gradient(const Matrix& logits, const TokenSeq& targets,
                            const std::vector<std::size_t>& predict_positions) {
    loss_masked(logits, targets, predict_positions);  // reuse the validation
    Matrix dlogits(logits.rows, logits.cols);
    const double inv_p = 1.0 / static_cast<double>(predict_positions.size());
    for (std::size_t p : predict_positions) {
        const double* row = logits.row(p - 1);
        double* drow = dlogits.row(p - 1);
        double m = row[0];
        for (std::size_t j = 1; j < logits.cols; ++j) m = std::max(m, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < logits.cols; ++j) z += std::exp(row[j] - m);
        for (std::size_t j = 0; j < logits.cols; ++j) {
            drow[j] += std::exp(row[j] - m) / z * inv_p;
        }
        drow[static_cast<std::size_t>(targets[p])] -= inv_p;
    }
    return dlogits;
}

struct TinyTransformer::Impl {
    static ParamLayout layout(const ModelConfig& c) { return make_layout(c); }

    static void validate_inputs(const ModelConfig& c, const TokenSeq& ids, const MaskMatrix& mask) {
        if (ids.empty()) throw ValidationError("EmptySequence", "need at least one token");
        if (mask.size() != ids.size()) {
            throw ValidationError("LengthMismatch",
                                  "mask is " + std::to_string(mask.size()) + " but ids are " +
                                      std::to_string(ids.size()));
        }
        if (ids.size() > c.max_seq_len) {
            throw ValidationError("LengthMismatch",
                                  "sequence longer than max_seq_len " + std::to_string(c.max_seq_len));
        }
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= c.vocab_size) {
                throw ValidationError("TokenOutOfRange",
                                      "id " + std::to_string(ids[i]) + " at position " +
                                          std::to_string(i));
            }
            if (mask.row_count(i) == 0) {
                throw ValidationError("RowFullyMasked", "row " + std::to_string(i));
            }
        }
    }

    // Full forward pass. Caches everything needed for backprop.
    static void forward(const ModelConfig& c, const std::vector<double>& params,
                        const TokenSeq& ids, const MaskMatrix& mask, Caches& cc,
                        AttnMap* attention) {
        validate_inputs(c, ids, mask);
        const ParamLayout lay = make_layout(c);
        const std::size_t n = ids.size();
        const std::size_t d = c.d_model;
        const std::size_t dh = d / c.n_heads;
        const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

        if (attention != nullptr) *attention = AttnMap(c.n_layers, c.n_heads, n);

        Matrix x(n, d);
        const double* tok = params.data() + lay.tok_emb.offset;
        const double* pos = params.data() + lay.pos_emb.offset;
        for (std::size_t i = 0; i < n; ++i) {
            const double* te = tok + static_cast<std::size_t>(ids[i]) * d;
            const double* pe = pos + i * d;
            double* xi = x.row(i);
            for (std::size_t j = 0; j < d; ++j) xi[j] = te[j] + pe[j];
        }

        cc.layers.assign(c.n_layers, LayerCache{});
        for (std::size_t li = 0; li < c.n_layers; ++li) {
            const LayerRefs& lr = lay.layers[li];
            LayerCache& lc = cc.layers[li];
            lc.x_in = x;

            lc.r1 = Matrix(n, d);
            rmsnorm_forward(lc.x_in, params.data() + lr.attn_norm.offset, lc.r1, lc.inv_r1);

            lc.q = Matrix(n, d);
            lc.k = Matrix(n, d);
            lc.v = Matrix(n, d);
            matmul_acc(lc.r1.data.data(), params.data() + lr.wq.offset, lc.q.data.data(), n, d, d);
            matmul_acc(lc.r1.data.data(), params.data() + lr.wk.offset, lc.k.data.data(), n, d, d);
            matmul_acc(lc.r1.data.data(), params.data() + lr.wv.offset, lc.v.data.data(), n, d, d);

            lc.concat = Matrix(n, d);
            lc.attn.assign(c.n_heads, Matrix(n, n));
            std::vector<double> scores(n);
            for (std::size_t h = 0; h < c.n_heads; ++h) {
                const std::size_t off = h * dh;
                Matrix& w = lc.attn[h];
                for (std::size_t i = 0; i < n; ++i) {
                    const double* qi = lc.q.row(i) + off;
                    // Additive -1e9 on forbidden keys; after the shift-by-max
                    // softmax their weights underflow to exactly 0, which the
                    // allowed-only loops below enforce by construction.
                    double m = kNegInf;
                    for (std::size_t j = 0; j < n; ++j) {
                        if (!mask.at(i, j)) continue;
                        const double* kj = lc.k.row(j) + off;
                        double s = 0.0;
                        for (std::size_t cidx = 0; cidx < dh; ++cidx) s += qi[cidx] * kj[cidx];
                        s *= inv_sqrt_dh;
                        scores[j] = s;
                        m = std::max(m, s);
                    }
                    double z = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        if (!mask.at(i, j)) continue;
                        const double e = std::exp(scores[j] - m);
                        w.at(i, j) = e;
                        z += e;
                    }
                    const double inv_z = 1.0 / z;
                    double* ci = lc.concat.row(i) + off;
                    for (std::size_t j = 0; j < n; ++j) {
                        if (!mask.at(i, j)) continue;
                        const double wij = w.at(i, j) * inv_z;
                        w.at(i, j) = wij;
                        const double* vj = lc.v.row(j) + off;
                        for (std::size_t cidx = 0; cidx < dh; ++cidx) ci[cidx] += wij * vj[cidx];
                    }
                    if (attention != nullptr) {
                        for (std::size_t j = 0; j < n; ++j) attention->at(li, h, i, j) = w.at(i, j);
                    }
                }
            }

            lc.x_mid = lc.x_in;
            matmul_acc(lc.concat.data.data(), params.data() + lr.wo.offset,
                       lc.x_mid.data.data(), n, d, d);

            lc.r2 = Matrix(n, d);
            rmsnorm_forward(lc.x_mid, params.data() + lr.ffn_norm.offset, lc.r2, lc.inv_r2);

            lc.u = Matrix(n, c.d_ff);
            for (std::size_t i = 0; i < n; ++i) {
                std::memcpy(lc.u.row(i), params.data() + lr.b1.offset, c.d_ff * sizeof(double));
            }
            matmul_acc(lc.r2.data.data(), params.data() + lr.w1.offset, lc.u.data.data(),
                       n, d, c.d_ff);
            lc.g = Matrix(n, c.d_ff);
            for (std::size_t i = 0; i < n * c.d_ff; ++i) lc.g.data[i] = gelu(lc.u.data[i]);

            x = lc.x_mid;
            for (std::size_t i = 0; i < n; ++i) {
                double* xi = x.row(i);
                const double* b2 = params.data() + lr.b2.offset;
                for (std::size_t j = 0; j < d; ++j) xi[j] += b2[j];
            }
            matmul_acc(lc.g.data.data(), params.data() + lr.w2.offset, x.data.data(),
                       n, c.d_ff, d);
        }

        cc.x_out = x;
        cc.rf = Matrix(n, d);
        rmsnorm_forward(cc.x_out, params.data() + lay.final_norm.offset, cc.rf, cc.inv_rf);

        cc.logits = Matrix(n, c.vocab_size);
        for (std::size_t i = 0; i < n; ++i) {
            std::memcpy(cc.logits.row(i), params.data() + lay.head_b.offset,
                        c.vocab_size * sizeof(double));
        }
        matmul_acc(cc.rf.data.data(), params.data() + lay.head_w.offset, cc.logits.data.data(),
                   n, d, c.vocab_size);
    }

    static void backward(const ModelConfig& c, const std::vector<double>& params,
                         const TokenSeq& ids, const MaskMatrix& mask, const Caches& cc,
                         const Matrix& dlogits, std::vector<double>& grads) {
        const ParamLayout lay = make_layout(c);
        const std::size_t n = ids.size();
        const std::size_t d = c.d_model;
        const std::size_t dh = d / c.n_heads;
        const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

        // Head and final norm.
        Matrix drf(n, d);
        matmul_bt_acc(dlogits.data.data(), params.data() + lay.head_w.offset, drf.data.data(),
                      n, c.vocab_size, d);
        matmul_at_acc(cc.rf.data.data(), dlogits.data.data(), grads.data() + lay.head_w.offset,
                      n, d, c.vocab_size);
        for (std::size_t i = 0; i < n; ++i) {
            const double* di = dlogits.row(i);
            double* gb = grads.data() + lay.head_b.offset;
            for (std::size_t j = 0; j < c.vocab_size; ++j) gb[j] += di[j];
        }
        Matrix dx(n, d);
        rmsnorm_backward(cc.x_out, params.data() + lay.final_norm.offset, cc.inv_rf, drf, dx,
                         grads.data() + lay.final_norm.offset);

        std::vector<double> scratch(n);
        for (std::size_t li = c.n_layers; li-- > 0;) {
            const LayerRefs& lr = lay.layers[li];
            const LayerCache& lc = cc.layers[li];

            // FFN branch: x = x_mid + gelu(r2 W1 + b1) W2 + b2
            Matrix dg(n, c.d_ff);
            matmul_bt_acc(dx.data.data(), params.data() + lr.w2.offset, dg.data.data(),
                          n, d, c.d_ff);
            matmul_at_acc(lc.g.data.data(), dx.data.data(), grads.data() + lr.w2.offset,
                          n, c.d_ff, d);
            for (std::size_t i = 0; i < n; ++i) {
                const double* di = dx.row(i);
                double* gb = grads.data() + lr.b2.offset;
                for (std::size_t j = 0; j < d; ++j) gb[j] += di[j];
            }
            Matrix du(n, c.d_ff);
            for (std::size_t i = 0; i < n * c.d_ff; ++i) {
                du.data[i] = dg.data[i] * gelu_grad(lc.u.data[i]);
            }
            Matrix dr2(n, d);
            matmul_bt_acc(du.data.data(), params.data() + lr.w1.offset, dr2.data.data(),
                          n, c.d_ff, d);
            matmul_at_acc(lc.r2.data.data(), du.data.data(), grads.data() + lr.w1.offset,
                          n, d, c.d_ff);
            for (std::size_t i = 0; i < n; ++i) {
                const double* di = du.row(i);
                double* gb = grads.data() + lr.b1.offset;
                for (std::size_t j = 0; j < c.d_ff; ++j) gb[j] += di[j];
            }
            rmsnorm_backward(lc.x_mid, params.data() + lr.ffn_norm.offset, lc.inv_r2, dr2, dx,
                             grads.data() + lr.ffn_norm.offset);

            // Attention branch: x_mid = x_in + concat Wo
            Matrix dconcat(n, d);
            matmul_bt_acc(dx.data.data(), params.data() + lr.wo.offset, dconcat.data.data(),
                          n, d, d);
            matmul_at_acc(lc.concat.data.data(), dx.data.data(), grads.data() + lr.wo.offset,
                          n, d, d);

            Matrix dq(n, d), dk(n, d), dv(n, d);
            for (std::size_t h = 0; h < c.n_heads; ++h) {
                const std::size_t off = h * dh;
                const Matrix& w = lc.attn[h];
                for (std::size_t i = 0; i < n; ++i) {
                    const double* dci = dconcat.row(i) + off;
                    // dW and dV for this row.
                    double inner = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        if (!mask.at(i, j)) continue;
                        const double* vj = lc.v.row(j) + off;
                        double dwij = 0.0;
                        for (std::size_t cidx = 0; cidx < dh; ++cidx) dwij += dci[cidx] * vj[cidx];
                        scratch[j] = dwij;
                        const double wij = w.at(i, j);
                        inner += wij * dwij;
                        double* dvj = dv.row(j) + off;
                        for (std::size_t cidx = 0; cidx < dh; ++cidx) {
                            dvj[cidx] += wij * dci[cidx];
                        }
                    }
                    // Softmax backprop, then into q and k.
                    double* dqi = dq.row(i) + off;
                    const double* qi = lc.q.row(i) + off;
                    for (std::size_t j = 0; j < n; ++j) {
                        if (!mask.at(i, j)) continue;
                        const double ds = w.at(i, j) * (scratch[j] - inner) * inv_sqrt_dh;
                        const double* kj = lc.k.row(j) + off;
                        double* dkj = dk.row(j) + off;
                        for (std::size_t cidx = 0; cidx < dh; ++cidx) {
                            dqi[cidx] += ds * kj[cidx];
                            dkj[cidx] += ds * qi[cidx];
                        }
                    }
                }
            }

            Matrix dr1(n, d);
            matmul_bt_acc(dq.data.data(), params.data() + lr.wq.offset, dr1.data.data(), n, d, d);
            matmul_bt_acc(dk.data.data(), params.data() + lr.wk.offset, dr1.data.data(), n, d, d);
            matmul_bt_acc(dv.data.data(), params.data() + lr.wv.offset, dr1.data.data(), n, d, d);
            matmul_at_acc(lc.r1.data.data(), dq.data.data(), grads.data() + lr.wq.offset, n, d, d);
            matmul_at_acc(lc.r1.data.data(), dk.data.data(), grads.data() + lr.wk.offset, n, d, d);
            matmul_at_acc(lc.r1.data.data(), dv.data.data(), grads.data() + lr.wv.offset, n, d, d);

            rmsnorm_backward(lc.x_in, params.data() + lr.attn_norm.offset, lc.inv_r1, dr1, dx,
                             grads.data() + lr.attn_norm.offset);
        }

        double* dtok = grads.data() + lay.tok_emb.offset;
        double* dpos = grads.data() + lay.pos_emb.offset;
        for (std::size_t i = 0; i < n; ++i) {
            const double* di = dx.row(i);
            double* te = dtok + static_cast<std::size_t>(ids[i]) * d;
            double* pe = dpos + i * d;
            for (std::size_t j = 0; j < d; ++j) {
                te[j] += di[j];
                pe[j] += di[j];
            }
        }
    }

    // forward() plus loss_masked in long double, structurally the same
    // computation. grad_check differentiates THIS function numerically and
    // compares against backward(); if the two paths ever computed different
    // functions the comparison itself would fail, so they cannot drift
    // silently.
    static long double loss_extended(const ModelConfig& c, const std::vector<double>& params,
                                     const TokenSeq& ids, const MaskMatrix& mask,
                                     const TokenSeq& targets,
                                     const std::vector<std::size_t>& predict_positions) {
        validate_inputs(c, ids, mask);
        if (predict_positions.empty()) {
            throw ValidationError("EmptyPredictSet", "need at least one predict position");
        }
        if (targets.size() != ids.size()) {
            throw ValidationError("LengthMismatch", "targets must align with logits rows");
        }
        const ParamLayout lay = make_layout(c);
        const std::size_t n = ids.size();
        const std::size_t d = c.d_model;
        const std::size_t dh = d / c.n_heads;
        const long double inv_sqrt_dh = 1.0L / sqrtl(static_cast<long double>(dh));
        const auto at = [&params](const TensorRef& r, std::size_t i, std::size_t j) {
            return static_cast<long double>(params[r.offset + i * r.cols + j]);
        };

        std::vector<long double> x(n * d);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                x[i * d + j] = at(lay.tok_emb, static_cast<std::size_t>(ids[i]), j) +
                               at(lay.pos_emb, i, j);
            }
        }

        const auto rmsnorm = [&](const std::vector<long double>& in, const TensorRef& gain) {
            std::vector<long double> out(n * d);
            for (std::size_t i = 0; i < n; ++i) {
                long double ms = 0.0L;
                for (std::size_t j = 0; j < d; ++j) ms += in[i * d + j] * in[i * d + j];
                ms /= static_cast<long double>(d);
                const long double ir = 1.0L / sqrtl(ms + static_cast<long double>(kNormEps));
                for (std::size_t j = 0; j < d; ++j) {
                    out[i * d + j] = in[i * d + j] * at(gain, 0, j) * ir;
                }
            }
            return out;
        };
        const auto project = [&](const std::vector<long double>& in, const TensorRef& w,
                                 std::size_t cols) {
            std::vector<long double> out(n * cols, 0.0L);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t p = 0; p < d; ++p) {
                    const long double v = in[i * d + p];
                    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] += v * at(w, p, j);
                }
            }
            return out;
        };

        std::vector<long double> scores(n), weights(n);
        for (std::size_t li = 0; li < c.n_layers; ++li) {
            const LayerRefs& lr = lay.layers[li];
            const std::vector<long double> r1 = rmsnorm(x, lr.attn_norm);
            const std::vector<long double> q = project(r1, lr.wq, d);
            const std::vector<long double> k = project(r1, lr.wk, d);
            const std::vector<long double> v = project(r1, lr.wv, d);

            std::vector<long double> concat(n * d, 0.0L);
            for (std::size_t h = 0; h < c.n_heads; ++h) {
                const std::size_t off = h * dh;
                for (std::size_t i = 0; i < n; ++i) {
                    long double m = static_cast<long double>(kNegInf);
                    for (std::size_t j = 0; j < n; ++j) {
                        if (!mask.at(i, j)) continue;
                        long double s = 0.0L;
                        for (std::size_t cidx = 0; cidx < dh; ++cidx) {
                            s += q[i * d + off + cidx] * k[j * d + off + cidx];
                        }
                        scores[j] = s * inv_sqrt_dh;
                        m = std::max(m, scores[j]);
                    }
                    long double z = 0.0L;
                    for (std::size_t j = 0; j < n; ++j) {
                        if (!mask.at(i, j)) continue;
                        weights[j] = expl(scores[j] - m);
                        z += weights[j];
                    }
                    const long double inv_z = 1.0L / z;
                    for (std::size_t j = 0; j < n; ++j) {
                        if (!mask.at(i, j)) continue;
                        const long double wij = weights[j] * inv_z;
                        for (std::size_t cidx = 0; cidx < dh; ++cidx) {
                            concat[i * d + off + cidx] += wij * v[j * d + off + cidx];
                        }
                    }
                }
            }

            std::vector<long double> x_mid = x;
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t p = 0; p < d; ++p) {
                    const long double cv = concat[i * d + p];
                    for (std::size_t j = 0; j < d; ++j) x_mid[i * d + j] += cv * at(lr.wo, p, j);
                }
            }

            const std::vector<long double> r2 = rmsnorm(x_mid, lr.ffn_norm);
            std::vector<long double> u(n * c.d_ff);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < c.d_ff; ++j) u[i * c.d_ff + j] = at(lr.b1, 0, j);
            }
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t p = 0; p < d; ++p) {
                    const long double rv = r2[i * d + p];
                    for (std::size_t j = 0; j < c.d_ff; ++j) {
                        u[i * c.d_ff + j] += rv * at(lr.w1, p, j);
                    }
                }
            }
            const long double gc = static_cast<long double>(0.7978845608028654);
            for (long double& uv : u) {
                const long double t = tanhl(gc * (uv + 0.044715L * uv * uv * uv));
                uv = 0.5L * uv * (1.0L + t);
            }

            x = std::move(x_mid);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < d; ++j) x[i * d + j] += at(lr.b2, 0, j);
                for (std::size_t p = 0; p < c.d_ff; ++p) {
                    const long double gv = u[i * c.d_ff + p];
                    for (std::size_t j = 0; j < d; ++j) x[i * d + j] += gv * at(lr.w2, p, j);
                }
            }
        }

        const std::vector<long double> rf = rmsnorm(x, lay.final_norm);
        std::vector<long double> logits(n * c.vocab_size);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < c.vocab_size; ++j) {
                logits[i * c.vocab_size + j] = at(lay.head_b, 0, j);
            }
            for (std::size_t p = 0; p < d; ++p) {
                const long double rv = rf[i * d + p];
                for (std::size_t j = 0; j < c.vocab_size; ++j) {
                    logits[i * c.vocab_size + j] += rv * at(lay.head_w, p, j);
                }
            }
        }

        long double total = 0.0L;
        for (std::size_t p : predict_positions) {
            if (p < 1 || p >= n) {
                throw ValidationError("IndexOutOfRange", "predict position " + std::to_string(p));
            }
            const TokenId t = targets[p];
            if (t < 0 || static_cast<std::size_t>(t) >= c.vocab_size) {
                throw ValidationError("TokenOutOfRange", "target id " + std::to_string(t));
            }
            const long double* row = logits.data() + (p - 1) * c.vocab_size;
            long double m = row[0];
            for (std::size_t j = 1; j < c.vocab_size; ++j) m = std::max(m, row[j]);
            long double z = 0.0L;
            for (std::size_t j = 0; j < c.vocab_size; ++j) z += expl(row[j] - m);
            total += m + logl(z) - row[static_cast<std::size_t>(t)];
        }
        return total / static_cast<long double>(predict_positions.size());
    }
};

TinyTransformer::TinyTransformer(const ModelConfig& config) : config_(config) {
    config_.validate();
    const ParamLayout lay = make_layout(config_);
    params_.assign(lay.total, 0.0);
    grads_.assign(lay.total, 0.0);

    std::mt19937_64 rng(config_.seed);
    std::normal_distribution<double> dist(0.0, 0.02);
    auto fill_normal = [&](const TensorRef& r) {
        for (std::size_t i = 0; i < r.size(); ++i) params_[r.offset + i] = dist(rng);
    };
    auto fill_const = [&](const TensorRef& r, double v) {
        for (std::size_t i = 0; i < r.size(); ++i) params_[r.offset + i] = v;
    };
    fill_normal(lay.tok_emb);
    fill_normal(lay.pos_emb);
    for (const auto& l : lay.layers) {
        fill_const(l.attn_norm, 1.0);
        fill_normal(l.wq);
        fill_normal(l.wk);
        fill_normal(l.wv);
        fill_normal(l.wo);
        fill_const(l.ffn_norm, 1.0);
        fill_normal(l.w1);
        fill_const(l.b1, 0.0);
        fill_normal(l.w2);
        fill_const(l.b2, 0.0);
    }
    fill_const(lay.final_norm, 1.0);
    fill_normal(lay.head_w);
    fill_const(lay.head_b, 0.0);
}

void TinyTransformer::zero_gradients() {
    std::fill(grads_.begin(), grads_.end(), 0.0);
}

Matrix TinyTransformer::forward(const TokenSeq& ids, const MaskMatrix& mask,
                                AttnMap* attention) const {
    Caches cc;
    Impl::forward(config_, params_, ids, mask, cc, attention);
    return std::move(cc.logits);
}

double TinyTransformer::loss_and_gradient(const TokenSeq& ids, const MaskMatrix& mask,
                                          const TokenSeq& targets,
                                          const std::vector<std::size_t>& predict_positions) {
    Caches cc;
    Impl::forward(config_, params_, ids, mask, cc, nullptr);
    const double loss = loss_masked(cc.logits, targets, predict_positions);
    const Matrix dlogits = loss_masked_gradient(cc.logits, targets, predict_positions);
    Impl::backward(config_, params_, ids, mask, cc, dlogits, grads_);
    return loss;
}

long double TinyTransformer::loss_extended(const TokenSeq& ids, const MaskMatrix& mask,
                                           const TokenSeq& targets,
                                           const std::vector<std::size_t>& predict_positions) const {
    return Impl::loss_extended(config_, params_, ids, mask, targets, predict_positions);
}

namespace {

constexpr char kCheckpointMagic[8] = {'C', 'V', 'S', 'K', 'C', 'K', 'P', '1'};

std::uint64_t fnv1a64(const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 1469598103934665603ull;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace

void TinyTransformer::save_checkpoint(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeFailure("IoFailure", "cannot open " + path + " for writing");
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const std::string cfg = config_.to_json();
    const std::uint32_t cfg_len = static_cast<std::uint32_t>(cfg.size());
    out.write(reinterpret_cast<const char*>(&cfg_len), sizeof(cfg_len));
    out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    const std::uint64_t count = params_.size();
    out.write(reinterpret_cast<const char*>(&count), sizeof(count));
    out.write(reinterpret_cast<const char*>(params_.data()),
              static_cast<std::streamsize>(params_.size() * sizeof(double)));
    const std::uint64_t checksum = fnv1a64(params_.data(), params_.size() * sizeof(double));
    out.write(reinterpret_cast<const char*>(&checksum), sizeof(checksum));
    if (!out) throw RuntimeFailure("IoFailure", "short write to " + path);
}

TinyTransformer TinyTransformer::load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw RuntimeFailure("IoFailure", "cannot open " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
        throw RuntimeFailure("BadCheckpoint", "unrecognised header in " + path);
    }
    std::uint32_t cfg_len = 0;
    in.read(reinterpret_cast<char*>(&cfg_len), sizeof(cfg_len));
    std::string cfg(cfg_len, '\0');
    in.read(cfg.data(), cfg_len);
    std::uint64_t count = 0;
    in.read(reinterpret_cast<char*>(&count), sizeof(count));
    if (!in) throw RuntimeFailure("BadCheckpoint", "truncated header in " + path);

    TinyTransformer model(ModelConfig::from_json(cfg));
    if (count != model.params_.size()) {
        throw RuntimeFailure("BadCheckpoint", "parameter count does not match config");
    }
    in.read(reinterpret_cast<char*>(model.params_.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
    std::uint64_t checksum = 0;
    in.read(reinterpret_cast<char*>(&checksum), sizeof(checksum));
    if (!in) throw RuntimeFailure("BadCheckpoint", "truncated payload in " + path);
    if (checksum != fnv1a64(model.params_.data(), count * sizeof(double))) {
        throw RuntimeFailure("ChecksumMismatch", "checkpoint payload corrupted: " + path);
    }
    return model;
}

}  // namespace convsink
