#include "model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "json.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace memlab::lm {

using json = nlohmann::ordered_json;

void ModelConfig::validate() const {
    if (n_layers < 1) fail(Errc::invalid_argument, "n_layers must be >= 1");
    if (n_heads < 1) fail(Errc::invalid_argument, "n_heads must be >= 1");
    if (d_model < 1 || d_model % n_heads != 0) {
        fail(Errc::invalid_argument, "d_model must be divisible by n_heads");
    }
    if (d_ff < 1) fail(Errc::invalid_argument, "d_ff must be >= 1");
    if (context_len < 2) fail(Errc::invalid_argument, "context_len must be >= 2");
    if (vocab_size < 5) fail(Errc::invalid_argument, "vocab_size must cover reserved ids");
}

std::string ModelConfig::to_json() const {
    json j;
    j["n_layers"] = n_layers;
    j["n_heads"] = n_heads;
    j["d_model"] = d_model;
    j["d_ff"] = d_ff;
    j["context_len"] = context_len;
    j["vocab_size"] = vocab_size;
    j["seed"] = seed;
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.is_object()) fail(Errc::format, "bad model config JSON");
    ModelConfig c;
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_model = j.value("d_model", c.d_model);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.context_len = j.value("context_len", c.context_len);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

namespace {

constexpr double kInitStd = 0.08;
constexpr double kRmsEps = 1e-5;
constexpr double kGeluK = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

void fill_normal(Mat& m, Rng& rng, double std) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = std * rng.normal();
    }
}

inline double gelu(double x) {
    const double u = kGeluK * (x + kGeluA * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad(double x) {
    const double u = kGeluK * (x + kGeluA * x * x * x);
    const double t = std::tanh(u);
    return 0.5 * (1.0 + t) +
           0.5 * x * (1.0 - t * t) * kGeluK * (1.0 + 3.0 * kGeluA * x * x);
}

}  // namespace

Model init_model(const ModelConfig& cfg) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    Rng rng(Rng::derive(cfg.seed, "model-init"));
    const int C = cfg.d_model, F = cfg.d_ff, V = cfg.vocab_size;

    m.wte.resize(V, C);
    fill_normal(m.wte, rng, kInitStd);
    m.wpe.resize(cfg.context_len, C);
    fill_normal(m.wpe, rng, kInitStd);
    m.blocks.resize(static_cast<size_t>(cfg.n_layers));
    for (auto& b : m.blocks) {
        b.ln1_gain = Mat::Ones(1, C);
        b.wq.resize(C, C); fill_normal(b.wq, rng, kInitStd);
        b.wk.resize(C, C); fill_normal(b.wk, rng, kInitStd);
        b.wv.resize(C, C); fill_normal(b.wv, rng, kInitStd);
        b.wo.resize(C, C); fill_normal(b.wo, rng, kInitStd);
        b.ln2_gain = Mat::Ones(1, C);
        b.w1.resize(F, C); fill_normal(b.w1, rng, kInitStd);
        b.w2.resize(C, F); fill_normal(b.w2, rng, kInitStd);
    }
    m.lnf_gain = Mat::Ones(1, C);
    m.wout.resize(V, C);
    fill_normal(m.wout, rng, kInitStd);
    return m;
}

Model zeros_like(const Model& src) {
    Model m;
    m.cfg = src.cfg;
    m.wte = Mat::Zero(src.wte.rows(), src.wte.cols());
    m.wpe = Mat::Zero(src.wpe.rows(), src.wpe.cols());
    m.blocks.resize(src.blocks.size());
    for (size_t i = 0; i < src.blocks.size(); ++i) {
        const Block& s = src.blocks[i];
        Block& d = m.blocks[i];
        d.ln1_gain = Mat::Zero(s.ln1_gain.rows(), s.ln1_gain.cols());
        d.wq = Mat::Zero(s.wq.rows(), s.wq.cols());
        d.wk = Mat::Zero(s.wk.rows(), s.wk.cols());
        d.wv = Mat::Zero(s.wv.rows(), s.wv.cols());
        d.wo = Mat::Zero(s.wo.rows(), s.wo.cols());
        d.ln2_gain = Mat::Zero(s.ln2_gain.rows(), s.ln2_gain.cols());
        d.w1 = Mat::Zero(s.w1.rows(), s.w1.cols());
        d.w2 = Mat::Zero(s.w2.rows(), s.w2.cols());
    }
    m.lnf_gain = Mat::Zero(src.lnf_gain.rows(), src.lnf_gain.cols());
    m.wout = Mat::Zero(src.wout.rows(), src.wout.cols());
    if (src.adapters) {
        AdapterSet a;
        a.rank = src.adapters->rank;
        a.alpha = src.adapters->alpha;
        a.layers.resize(src.adapters->layers.size());
        for (size_t i = 0; i < a.layers.size(); ++i) {
            for (int p = 0; p < 4; ++p) {
                const Adapter& sa = src.adapters->layers[i][p];
                a.layers[i][p].a = Mat::Zero(sa.a.rows(), sa.a.cols());
                a.layers[i][p].b = Mat::Zero(sa.b.rows(), sa.b.cols());
            }
        }
        m.adapters = std::move(a);
    }
    return m;
}

std::vector<TensorRef> base_tensors(Model& m) {
    std::vector<TensorRef> out;
    out.push_back({"wte", &m.wte});
    out.push_back({"wpe", &m.wpe});
    for (size_t i = 0; i < m.blocks.size(); ++i) {
        const std::string p = "layers." + std::to_string(i) + ".";
        Block& b = m.blocks[i];
        out.push_back({p + "ln1.gain", &b.ln1_gain});
        out.push_back({p + "attn.wq", &b.wq});
        out.push_back({p + "attn.wk", &b.wk});
        out.push_back({p + "attn.wv", &b.wv});
        out.push_back({p + "attn.wo", &b.wo});
        out.push_back({p + "ln2.gain", &b.ln2_gain});
        out.push_back({p + "mlp.w1", &b.w1});
        out.push_back({p + "mlp.w2", &b.w2});
    }
    out.push_back({"lnf.gain", &m.lnf_gain});
    out.push_back({"wout", &m.wout});
    return out;
}

std::vector<TensorRef> adapter_tensors(Model& m) {
    std::vector<TensorRef> out;
    if (!m.adapters) return out;
    static const char* proj[4] = {"wq", "wk", "wv", "wo"};
    for (size_t i = 0; i < m.adapters->layers.size(); ++i) {
        for (int p = 0; p < 4; ++p) {
            const std::string base =
                "layers." + std::to_string(i) + ".attn." + proj[p];
            out.push_back({base + ".lora_a", &m.adapters->layers[i][p].a});
            out.push_back({base + ".lora_b", &m.adapters->layers[i][p].b});
        }
    }
    return out;
}

size_t param_count(const Model& m, bool include_adapters) {
    size_t n = 0;
    auto& mm = const_cast<Model&>(m);
    for (const auto& t : base_tensors(mm)) n += static_cast<size_t>(t.tensor->size());
    if (include_adapters) {
        for (const auto& t : adapter_tensors(mm)) n += static_cast<size_t>(t.tensor->size());
    }
    return n;
}

void attach_adapters(Model& m, int rank, double alpha, uint64_t seed) {
    const int C = m.cfg.d_model;
    if (rank < 1) fail(Errc::invalid_argument, "adapter rank must be >= 1");
    if (rank > C) fail(Errc::invalid_argument, "adapter rank exceeds projection dims");
    AdapterSet set;
    set.rank = rank;
    set.alpha = alpha;
    Rng rng(Rng::derive(seed, "lora-init"));
    set.layers.resize(m.blocks.size());
    for (auto& layer : set.layers) {
        for (int p = 0; p < 4; ++p) {
            layer[p].a.resize(rank, C);
            fill_normal(layer[p].a, rng, 0.02);
            layer[p].b = Mat::Zero(C, rank);
        }
    }
    m.adapters = std::move(set);
}

// --- forward / backward -----------------------------------------------------

namespace {

struct LayerCache {
    Mat a_norm;             // [T,C]
    std::vector<double> rms1_inv;
    Mat q, k, v;            // [T,C]
    std::vector<Mat> lora_p;  // cached a_norm * A^T per projection when adapters on
    std::vector<Mat> att;   // per head [T,T]
    Mat u;                  // [T,C]
    Mat x1;                 // [T,C] after attention residual
    Mat b_norm;             // [T,C]
    std::vector<double> rms2_inv;
    Mat h1, g;              // [T,F]
    Mat x_out;              // [T,C]
};

struct ForwardCache {
    Mat x0;  // [T,C]
    std::vector<LayerCache> layers;
    Mat f_norm;  // [T,C]
    std::vector<double> rmsf_inv;
    Mat logits;  // [T,V]
};

void rmsnorm_fwd(const Mat& x, const Mat& gain, Mat& out, std::vector<double>& rinv) {
    const Eigen::Index T = x.rows(), C = x.cols();
    out.resize(T, C);
    rinv.resize(static_cast<size_t>(T));
    for (Eigen::Index i = 0; i < T; ++i) {
        const double ms = x.row(i).squaredNorm() / static_cast<double>(C);
        const double r = 1.0 / std::sqrt(ms + kRmsEps);
        rinv[static_cast<size_t>(i)] = r;
        out.row(i) = x.row(i).cwiseProduct(gain.row(0)) * r;
    }
}

// dY flows back through y = gain .* x * rinv; accumulates dX and dGain
void rmsnorm_bwd(const Mat& x, const Mat& gain, const std::vector<double>& rinv,
                 const Mat& dy, Mat& dx, Mat* dgain) {
    const Eigen::Index T = x.rows(), C = x.cols();
    for (Eigen::Index i = 0; i < T; ++i) {
        const double r = rinv[static_cast<size_t>(i)];
        const auto dyg = dy.row(i).cwiseProduct(gain.row(0));
        const double s = dyg.cwiseProduct(x.row(i)).sum();
        dx.row(i) += dyg * r - x.row(i) * (r * r * r * s / static_cast<double>(C));
        if (dgain) dgain->row(0) += dy.row(i).cwiseProduct(x.row(i)) * r;
    }
}

// projection with optional low-rank adapter; caches P = x * A^T for backward
Mat project(const Model& m, const Mat& x, const Mat& w, int layer, int proj,
            Mat* lora_p) {
    Mat y = x * w.transpose();
    if (m.adapters) {
        const Adapter& ad = m.adapters->layers[static_cast<size_t>(layer)][static_cast<size_t>(proj)];
        const double s = m.adapters->alpha / static_cast<double>(m.adapters->rank);
        Mat p = x * ad.a.transpose();
        y.noalias() += s * (p * ad.b.transpose());
        if (lora_p) *lora_p = std::move(p);
    }
    return y;
}

void forward_cached(const Model& m, std::span<const int> ids, ForwardCache& fc) {
    const int T = static_cast<int>(ids.size());
    const int C = m.cfg.d_model;
    const int H = m.cfg.n_heads;
    const int dh = m.head_dim();
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    if (T == 0) fail(Errc::invalid_argument, "empty sequence");
    if (T > m.cfg.context_len) fail(Errc::invalid_argument, "sequence exceeds context length");
    for (int id : ids) {
        if (id < 0 || id >= m.cfg.vocab_size) fail(Errc::invalid_argument, "token id out of range");
    }

    fc.x0.resize(T, C);
    for (int i = 0; i < T; ++i) {
        fc.x0.row(i) = m.wte.row(ids[static_cast<size_t>(i)]) + m.wpe.row(i);
    }

    fc.layers.resize(m.blocks.size());
    const Mat* x = &fc.x0;
    for (size_t li = 0; li < m.blocks.size(); ++li) {
        const Block& blk = m.blocks[li];
        LayerCache& lc = fc.layers[li];

        rmsnorm_fwd(*x, blk.ln1_gain, lc.a_norm, lc.rms1_inv);
        if (m.adapters) lc.lora_p.resize(4);
        Mat* lp = m.adapters ? lc.lora_p.data() : nullptr;
        lc.q = project(m, lc.a_norm, blk.wq, static_cast<int>(li), 0, lp ? &lp[0] : nullptr);
        lc.k = project(m, lc.a_norm, blk.wk, static_cast<int>(li), 1, lp ? &lp[1] : nullptr);
        lc.v = project(m, lc.a_norm, blk.wv, static_cast<int>(li), 2, lp ? &lp[2] : nullptr);

        lc.att.assign(static_cast<size_t>(H), Mat());
        lc.u.resize(T, C);
        for (int h = 0; h < H; ++h) {
            const auto qh = lc.q.middleCols(h * dh, dh);
            const auto kh = lc.k.middleCols(h * dh, dh);
            const auto vh = lc.v.middleCols(h * dh, dh);
            Mat scores = qh * kh.transpose() * att_scale;  // [T,T]
            Mat& att = lc.att[static_cast<size_t>(h)];
            att = Mat::Zero(T, T);
            for (int i = 0; i < T; ++i) {
                double mx = -std::numeric_limits<double>::infinity();
                for (int j = 0; j <= i; ++j) mx = std::max(mx, scores(i, j));
                double denom = 0.0;
                for (int j = 0; j <= i; ++j) {
                    const double e = std::exp(scores(i, j) - mx);
                    att(i, j) = e;
                    denom += e;
                }
                att.row(i).head(i + 1) /= denom;
            }
            lc.u.middleCols(h * dh, dh).noalias() = att * vh;
        }

        Mat o = project(m, lc.u, blk.wo, static_cast<int>(li), 3,
                        lp ? &lp[3] : nullptr);
        lc.x1 = *x + o;

        rmsnorm_fwd(lc.x1, blk.ln2_gain, lc.b_norm, lc.rms2_inv);
        lc.h1.noalias() = lc.b_norm * blk.w1.transpose();
        lc.g = lc.h1.unaryExpr([](double v) { return gelu(v); });
        lc.x_out = lc.x1;
        lc.x_out.noalias() += lc.g * blk.w2.transpose();

        x = &lc.x_out;
    }

    rmsnorm_fwd(*x, m.lnf_gain, fc.f_norm, fc.rmsf_inv);
    fc.logits.noalias() = fc.f_norm * m.wout.transpose();
}

}  // namespace

double ce_from_logits_row(const Mat& logits, int row, int label) {
    const Eigen::Index V = logits.cols();
    if (label < 0 || label >= V) fail(Errc::invalid_argument, "label out of range");
    const double mx = logits.row(row).maxCoeff();
    double denom = 0.0;
    for (Eigen::Index v = 0; v < V; ++v) denom += std::exp(logits(row, v) - mx);
    return mx + std::log(denom) - logits(row, label);
}

Mat forward_logits(const Model& m, std::span<const int> ids) {
    ForwardCache fc;
    forward_cached(m, ids, fc);
    return std::move(fc.logits);
}

namespace {

// assemble [BOS, context, target[:-1]] with labels on the target region
void make_conditional_item(const Model& m, std::span<const int> context,
                           std::span<const int> target, std::vector<int>& input,
                           std::vector<int>& labels) {
    if (target.empty()) fail(Errc::invalid_argument, "empty target");
    if (static_cast<int>(context.size() + target.size()) > m.cfg.context_len) {
        fail(Errc::invalid_argument, "context + target exceeds context length");
    }
    input.clear();
    labels.clear();
    input.push_back(kBosId);
    input.insert(input.end(), context.begin(), context.end());
    input.insert(input.end(), target.begin(), target.end() - 1);
    labels.assign(input.size(), -1);
    // position context.size() predicts target[0]
    for (size_t t = 0; t < target.size(); ++t) {
        labels[context.size() + t] = target[t];
    }
}

double ce_over_item(const Model& m, const std::vector<int>& input,
                    const std::vector<int>& labels, int* count_out) {
    ForwardCache fc;
    forward_cached(m, input, fc);
    double sum = 0.0;
    int count = 0;
    for (size_t j = 0; j < labels.size(); ++j) {
        if (labels[j] < 0) continue;
        sum += ce_from_logits_row(fc.logits, static_cast<int>(j), labels[j]);
        ++count;
    }
    if (count_out) *count_out = count;
    return sum;
}

}  // namespace

double conditional_loss(const Model& m, std::span<const int> context,
                        std::span<const int> target) {
    std::vector<int> input, labels;
    make_conditional_item(m, context, target, input, labels);
    int count = 0;
    const double sum = ce_over_item(m, input, labels, &count);
    return sum / static_cast<double>(count);
}

double sequence_logprob(const Model& m, std::span<const int> seq) {
    if (seq.empty()) fail(Errc::invalid_argument, "empty sequence");
    if (static_cast<int>(seq.size()) > m.cfg.context_len) {
        fail(Errc::invalid_argument, "sequence exceeds context length");
    }
    std::vector<int> input;
    input.push_back(kBosId);
    input.insert(input.end(), seq.begin(), seq.end() - 1);
    std::vector<int> labels(seq.begin(), seq.end());
    ForwardCache fc;
    forward_cached(m, input, fc);
    double sum = 0.0;
    for (size_t j = 0; j < labels.size(); ++j) {
        sum += ce_from_logits_row(fc.logits, static_cast<int>(j), labels[j]);
    }
    return -sum;
}

std::vector<int> generate(const Model& m, std::span<const int> prompt,
                          const GenerationParams& params) {
    if (static_cast<int>(prompt.size()) >= m.cfg.context_len) {
        fail(Errc::invalid_argument, "prompt fills context");
    }
    if (params.temperature <= 0.0) fail(Errc::invalid_argument, "temperature must be > 0");
    if (params.max_new_tokens < 1) fail(Errc::invalid_argument, "max_new_tokens must be >= 1");

    const int V = m.cfg.vocab_size;
    std::vector<int> input;
    input.reserve(prompt.size() + 1 + static_cast<size_t>(params.max_new_tokens));
    input.push_back(kBosId);
    input.insert(input.end(), prompt.begin(), prompt.end());

    const int budget = std::min(params.max_new_tokens,
                                m.cfg.context_len - static_cast<int>(input.size()));
    Rng rng(params.rng_seed);
    std::vector<int> out;
    for (int step = 0; step < budget; ++step) {
        ForwardCache fc;
        forward_cached(m, input, fc);
        const int last = static_cast<int>(input.size()) - 1;

        int next;
        if (params.greedy) {
            next = 0;
            double best = fc.logits(last, 0);
            for (int v = 1; v < V; ++v) {
                if (fc.logits(last, v) > best) {
                    best = fc.logits(last, v);
                    next = v;
                }
            }
        } else {
            std::vector<int> cand(static_cast<size_t>(V));
            std::iota(cand.begin(), cand.end(), 0);
            if (params.top_k > 0 && params.top_k < V) {
                std::stable_sort(cand.begin(), cand.end(), [&](int a, int b) {
                    return fc.logits(last, a) > fc.logits(last, b);
                });
                cand.resize(static_cast<size_t>(params.top_k));
            }
            double mx = -std::numeric_limits<double>::infinity();
            for (int v : cand) mx = std::max(mx, fc.logits(last, v) / params.temperature);
            std::vector<double> w(cand.size());
            double total = 0.0;
            for (size_t i = 0; i < cand.size(); ++i) {
                w[i] = std::exp(fc.logits(last, cand[i]) / params.temperature - mx);
                total += w[i];
            }
            double r = rng.real() * total;
            size_t pick = cand.size() - 1;
            double acc = 0.0;
            for (size_t i = 0; i < cand.size(); ++i) {
                acc += w[i];
                if (r < acc) {
                    pick = i;
                    break;
                }
            }
            next = cand[pick];
        }
        if (next == kEosId) break;
        out.push_back(next);
        input.push_back(next);
    }
    return out;
}

// --- backward ---------------------------------------------------------------

SeqBackpropResult backprop_sequence(const Model& m, std::span<const int> input,
                                    std::span<const int> labels, double label_weight,
                                    GradMode mode, Model* grads, Mat* dx0_out) {
    if (input.size() != labels.size()) fail(Errc::internal, "labels misaligned");
    ForwardCache fc;
    forward_cached(m, input, fc);

    const int T = static_cast<int>(input.size());
    const int C = m.cfg.d_model;
    const int H = m.cfg.n_heads;
    const int dh = m.head_dim();
    const int V = m.cfg.vocab_size;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const bool train_base = (mode == GradMode::Base);
    const bool train_adapters = (mode == GradMode::AdapterOnly);
    if (train_adapters && !m.adapters) fail(Errc::state, "no adapters attached");

    SeqBackpropResult res;

    // dLogits
    Mat dlogits = Mat::Zero(T, V);
    for (int j = 0; j < T; ++j) {
        const int label = labels[static_cast<size_t>(j)];
        if (label < 0) continue;
        res.ce_sum += ce_from_logits_row(fc.logits, j, label);
        ++res.label_count;
        const double mx = fc.logits.row(j).maxCoeff();
        double denom = 0.0;
        for (int v = 0; v < V; ++v) denom += std::exp(fc.logits(j, v) - mx);
        for (int v = 0; v < V; ++v) {
            dlogits(j, v) = label_weight * std::exp(fc.logits(j, v) - mx) / denom;
        }
        dlogits(j, label) -= label_weight;
    }

    if (!std::isfinite(res.ce_sum)) fail(Errc::numeric, "non-finite loss");
    if (grads == nullptr && dx0_out == nullptr) return res;

    // head
    if (grads && train_base) grads->wout.noalias() += dlogits.transpose() * fc.f_norm;
    Mat df = dlogits * m.wout;  // [T,C]

    // final rmsnorm
    const Mat& x_last = m.blocks.empty() ? fc.x0 : fc.layers.back().x_out;
    Mat dx = Mat::Zero(T, C);
    rmsnorm_bwd(x_last, m.lnf_gain, fc.rmsf_inv, df, dx,
                (grads && train_base) ? &grads->lnf_gain : nullptr);

    const double lora_scale =
        m.adapters ? m.adapters->alpha / static_cast<double>(m.adapters->rank) : 0.0;

    for (int li = static_cast<int>(m.blocks.size()) - 1; li >= 0; --li) {
        const Block& blk = m.blocks[static_cast<size_t>(li)];
        const LayerCache& lc = fc.layers[static_cast<size_t>(li)];
        Block* gb = grads ? &grads->blocks[static_cast<size_t>(li)] : nullptr;
        const Mat& x_in = (li == 0) ? fc.x0 : fc.layers[static_cast<size_t>(li - 1)].x_out;

        // x_out = x1 + g * w2^T
        Mat dm = dx;  // gradient into the MLP output
        if (gb && train_base) gb->w2.noalias() += dm.transpose() * lc.g;
        Mat dg = dm * blk.w2;  // [T,F]
        Mat dh1 = dg.cwiseProduct(lc.h1.unaryExpr([](double v) { return gelu_grad(v); }));
        if (gb && train_base) gb->w1.noalias() += dh1.transpose() * lc.b_norm;
        Mat dbn = dh1 * blk.w1;  // [T,C]

        Mat dx1 = dx;  // residual path
        rmsnorm_bwd(lc.x1, blk.ln2_gain, lc.rms2_inv, dbn, dx1,
                    (gb && train_base) ? &gb->ln2_gain : nullptr);

        // x1 = x_in + project(u, wo)
        const Mat& do_ = dx1;
        auto backprop_projection = [&](const Mat& w, const Adapter* ad, Mat* gw,
                                       Adapter* gad, const Mat& x_proj_in,
                                       const Mat& lora_p, const Mat& dy) -> Mat {
            if (gw && train_base) gw->noalias() += dy.transpose() * x_proj_in;
            Mat dxp = dy * w;
            if (ad) {
                // y += s * (x A^T) B^T
                Mat dp = lora_scale * (dy * ad->b);  // [T,r]
                if (gad && train_adapters) {
                    gad->b.noalias() += lora_scale * (dy.transpose() * lora_p);
                    gad->a.noalias() += dp.transpose() * x_proj_in;
                }
                dxp.noalias() += dp * ad->a;
            }
            return dxp;
        };

        const Adapter* ads[4] = {nullptr, nullptr, nullptr, nullptr};
        Adapter* gads[4] = {nullptr, nullptr, nullptr, nullptr};
        if (m.adapters) {
            for (int p = 0; p < 4; ++p) {
                ads[p] = &m.adapters->layers[static_cast<size_t>(li)][static_cast<size_t>(p)];
                if (grads && grads->adapters) {
                    gads[p] = &grads->adapters->layers[static_cast<size_t>(li)][static_cast<size_t>(p)];
                }
            }
        }

        Mat du = backprop_projection(blk.wo, ads[3], gb ? &gb->wo : nullptr, gads[3],
                                     lc.u, m.adapters ? lc.lora_p[3] : Mat(), do_);

        Mat dq = Mat::Zero(T, C), dk = Mat::Zero(T, C), dv = Mat::Zero(T, C);
        for (int h = 0; h < H; ++h) {
            const auto qh = lc.q.middleCols(h * dh, dh);
            const auto kh = lc.k.middleCols(h * dh, dh);
            const auto vh = lc.v.middleCols(h * dh, dh);
            const Mat& att = lc.att[static_cast<size_t>(h)];
            const auto duh = du.middleCols(h * dh, dh);

            Mat dp = duh * vh.transpose();  // [T,T]
            dv.middleCols(h * dh, dh).noalias() += att.transpose() * duh;

            // softmax backward row-wise (masked entries have att == 0)
            Mat ds(T, T);
            for (int i = 0; i < T; ++i) {
                const double dot = dp.row(i).cwiseProduct(att.row(i)).sum();
                ds.row(i) = (att.row(i).array() * (dp.row(i).array() - dot)).matrix();
            }
            dq.middleCols(h * dh, dh).noalias() += ds * kh * att_scale;
            dk.middleCols(h * dh, dh).noalias() += ds.transpose() * qh * att_scale;
        }

        Mat da = backprop_projection(blk.wq, ads[0], gb ? &gb->wq : nullptr, gads[0],
                                     lc.a_norm, m.adapters ? lc.lora_p[0] : Mat(), dq);
        da += backprop_projection(blk.wk, ads[1], gb ? &gb->wk : nullptr, gads[1],
                                  lc.a_norm, m.adapters ? lc.lora_p[1] : Mat(), dk);
        da += backprop_projection(blk.wv, ads[2], gb ? &gb->wv : nullptr, gads[2],
                                  lc.a_norm, m.adapters ? lc.lora_p[2] : Mat(), dv);

        Mat dx_in = dx1;  // residual into x_in
        rmsnorm_bwd(x_in, blk.ln1_gain, lc.rms1_inv, da, dx_in,
                    (gb && train_base) ? &gb->ln1_gain : nullptr);
        dx = std::move(dx_in);
    }

    if (grads && train_base) {
        for (int i = 0; i < T; ++i) {
            grads->wte.row(input[static_cast<size_t>(i)]) += dx.row(i);
            grads->wpe.row(i) += dx.row(i);
        }
    }
    if (dx0_out) *dx0_out = std::move(dx);
    return res;
}

Mat token_gradients(const Model& m, std::span<const int> seq,
                    std::span<const int> target, std::span<const int> positions) {
    if (target.empty()) fail(Errc::invalid_argument, "empty target");
    for (int p : positions) {
        if (p < 0 || p >= static_cast<int>(seq.size())) {
            fail(Errc::invalid_argument, "token_gradients: position inside target region");
        }
    }
    std::vector<int> input, labels;
    make_conditional_item(m, seq, target, input, labels);

    Mat dx0;
    const double w = 1.0 / static_cast<double>(target.size());
    backprop_sequence(m, input, labels, w, GradMode::Base, nullptr, &dx0);

    Mat out(static_cast<Eigen::Index>(positions.size()), m.cfg.vocab_size);
    for (size_t i = 0; i < positions.size(); ++i) {
        // +1 for the BOS offset in the assembled input
        out.row(static_cast<Eigen::Index>(i)) =
            dx0.row(positions[i] + 1) * m.wte.transpose();
    }
    if (!out.allFinite()) fail(Errc::numeric, "non-finite token gradients");
    return out;
}

std::vector<CeSum> batched_ce(const Model& m, const std::vector<EvalItem>& items) {
    std::vector<CeSum> out(items.size());
    ParallelGuard guard;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(thread_budget())
#endif
    for (long idx = 0; idx < static_cast<long>(items.size()); ++idx) {
        guard.run([&, idx] {
            const auto& item = items[static_cast<size_t>(idx)];
            ForwardCache fc;
            forward_cached(m, item.input, fc);
            CeSum cs;
            for (size_t j = 0; j < item.labels.size(); ++j) {
                if (item.labels[j] < 0) continue;
                cs.sum +=
                    ce_from_logits_row(fc.logits, static_cast<int>(j), item.labels[j]);
                ++cs.count;
            }
            out[static_cast<size_t>(idx)] = cs;
        });
    }
    guard.rethrow_if_any();
    return out;
}

}  // namespace memlab::lm
