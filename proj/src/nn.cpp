#include "deauville/nn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "deauville/error.hpp"

namespace deauville::nn {

static_assert(std::endian::native == std::endian::little, "tensor blobs assume a little-endian host");

void Parameter::reset(std::string param_name, Eigen::Index rows, Eigen::Index cols)
{
    name = std::move(param_name);
    value = Matrix::Zero(rows, cols);
    grad = Matrix::Zero(rows, cols);
    adam_m = Matrix::Zero(rows, cols);
    adam_v = Matrix::Zero(rows, cols);
}

void init_normal(Parameter& p, double stddev, Rng& rng)
{
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
        p.value.data()[i] = stddev * rng.normal();
    }
}

double grad_norm(const ParameterList& params)
{
    double sum = 0.0;
    for (const auto* p : params) {
        sum += p->grad.squaredNorm();
    }
    return std::sqrt(sum);
}

void zero_grads(const ParameterList& params)
{
    for (auto* p : params) {
        p->zero_grad();
    }
}

void quantize_to_float(const ParameterList& params)
{
    for (auto* p : params) {
        for (Eigen::Index i = 0; i < p->value.size(); ++i) {
            p->value.data()[i] = static_cast<double>(static_cast<float>(p->value.data()[i]));
        }
    }
}

bool all_finite(const ParameterList& params)
{
    for (const auto* p : params) {
        if (!p->value.allFinite()) {
            return false;
        }
    }
    return true;
}

void Adam::step(const ParameterList& params)
{
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto* p : params) {
        if (p->frozen) {
            continue;
        }
        p->adam_m = beta1_ * p->adam_m + (1.0 - beta1_) * p->grad;
        p->adam_v = beta2_ * p->adam_v + (1.0 - beta2_) * p->grad.cwiseProduct(p->grad);
        p->value.array() -= lr_ * (p->adam_m.array() / c1) / ((p->adam_v.array() / c2).sqrt() + eps_);
    }
}

std::vector<TensorInfo> write_tensors(const std::filesystem::path& blob_path, const ParameterList& params)
{
    if (blob_path.has_parent_path()) {
        std::filesystem::create_directories(blob_path.parent_path());
    }
    std::ofstream out(blob_path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + blob_path.string());
    }
    std::vector<TensorInfo> manifest;
    std::size_t offset = 0;
    std::vector<float> buffer;
    for (const auto* p : params) {
        buffer.resize(static_cast<std::size_t>(p->value.size()));
        for (Eigen::Index i = 0; i < p->value.size(); ++i) {
            buffer[static_cast<std::size_t>(i)] = static_cast<float>(p->value.data()[i]);
        }
        out.write(reinterpret_cast<const char*>(buffer.data()),
                  static_cast<std::streamsize>(buffer.size() * sizeof(float)));
        manifest.push_back({p->name, p->value.rows(), p->value.cols(), offset});
        offset += buffer.size() * sizeof(float);
    }
    if (!out) {
        throw IoError("short write to " + blob_path.string());
    }
    return manifest;
}

void read_tensors(const std::filesystem::path& blob_path, const std::vector<TensorInfo>& manifest,
                  const ParameterList& params)
{
    std::ifstream in(blob_path, std::ios::binary);
    if (!in) {
        throw IoError("cannot read " + blob_path.string());
    }
    std::map<std::string, const TensorInfo*> by_name;
    for (const auto& info : manifest) {
        by_name[info.name] = &info;
    }
    std::vector<float> buffer;
    for (auto* p : params) {
        const auto it = by_name.find(p->name);
        if (it == by_name.end()) {
            throw ValidationError("tensor missing from checkpoint: " + p->name);
        }
        const TensorInfo& info = *it->second;
        if (info.rows != p->value.rows() || info.cols != p->value.cols()) {
            throw ValidationError("tensor shape mismatch for " + p->name);
        }
        buffer.resize(static_cast<std::size_t>(info.rows * info.cols));
        in.seekg(static_cast<std::streamoff>(info.offset));
        in.read(reinterpret_cast<char*>(buffer.data()), static_cast<std::streamsize>(buffer.size() * sizeof(float)));
        if (!in) {
            throw IoError("truncated tensor blob " + blob_path.string());
        }
        for (Eigen::Index i = 0; i < p->value.size(); ++i) {
            p->value.data()[i] = static_cast<double>(buffer[static_cast<std::size_t>(i)]);
        }
    }
}

// ---------------------------------------------------------------- layers

Linear::Linear(const std::string& name, Eigen::Index in, Eigen::Index out)
{
    weight.reset(name + ".weight", in, out);
    bias.reset(name + ".bias", 1, out);
}

void Linear::init(Rng& rng)
{
    init_normal(weight, 1.0 / std::sqrt(static_cast<double>(weight.value.rows())), rng);
    bias.value.setZero();
}

Matrix Linear::forward(const Matrix& x) const
{
    Matrix y = x * weight.value;
    y.rowwise() += bias.value.row(0);
    return y;
}

Matrix Linear::backward(const Matrix& x, const Matrix& dy)
{
    if (!weight.frozen) {
        weight.grad.noalias() += x.transpose() * dy;
        bias.grad.row(0) += dy.colwise().sum();
    }
    return dy * weight.value.transpose();
}

Matrix Linear::backward_input_only(const Matrix& dy) const
{
    return dy * weight.value.transpose();
}

LayerNorm::LayerNorm(const std::string& name, Eigen::Index dim)
{
    gamma.reset(name + ".gamma", 1, dim);
    beta.reset(name + ".beta", 1, dim);
    gamma.value.setOnes();
}

Matrix LayerNorm::forward(const Matrix& x, Cache* cache) const
{
    const Eigen::Index n = x.cols();
    Matrix normalized(x.rows(), n);
    Eigen::VectorXd inv_std(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double mean = x.row(r).mean();
        const double var = (x.row(r).array() - mean).square().mean();
        inv_std(r) = 1.0 / std::sqrt(var + eps);
        normalized.row(r) = (x.row(r).array() - mean) * inv_std(r);
    }
    Matrix y = normalized.array().rowwise() * gamma.value.row(0).array();
    y.rowwise() += beta.value.row(0);
    if (cache != nullptr) {
        cache->normalized = std::move(normalized);
        cache->inv_std = std::move(inv_std);
    }
    return y;
}

Matrix LayerNorm::backward(const Cache& cache, const Matrix& dy)
{
    if (!gamma.frozen) {
        gamma.grad.row(0) += dy.cwiseProduct(cache.normalized).colwise().sum();
        beta.grad.row(0) += dy.colwise().sum();
    }
    const Matrix dnorm = dy.array().rowwise() * gamma.value.row(0).array();
    Matrix dx(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
        const double mean_d = dnorm.row(r).mean();
        const double mean_dx = dnorm.row(r).cwiseProduct(cache.normalized.row(r)).mean();
        dx.row(r) = cache.inv_std(r)
            * (dnorm.row(r).array() - mean_d - cache.normalized.row(r).array() * mean_dx);
    }
    return dx;
}

namespace {
constexpr double kGeluC = 0.7978845608028654; // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
} // namespace

Matrix gelu(const Matrix& x)
{
    return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v))); });
}

Matrix gelu_backward(const Matrix& x, const Matrix& dy)
{
    Matrix dx(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double v = x.data()[i];
        const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
        const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
        dx.data()[i] = dy.data()[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
    }
    return dx;
}

Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng)
{
    Matrix mask = Matrix::Ones(rows, cols);
    if (rate <= 0.0) {
        return mask;
    }
    const double scale = 1.0 / (1.0 - rate);
    for (Eigen::Index i = 0; i < mask.size(); ++i) {
        mask.data()[i] = rng.uniform() < rate ? 0.0 : scale;
    }
    return mask;
}

Matrix softmax_rows(const Matrix& logits)
{
    Matrix out(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const double mx = logits.row(r).maxCoeff();
        out.row(r) = (logits.row(r).array() - mx).exp();
        out.row(r) /= out.row(r).sum();
    }
    return out;
}

double cross_entropy(const Matrix& logits, const std::vector<int>& targets, double normalizer, Matrix* dlogits)
{
    require(static_cast<std::size_t>(logits.rows()) == targets.size(), "cross_entropy: target count mismatch");
    const Matrix probs = softmax_rows(logits);
    double loss = 0.0;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const double mx = logits.row(r).maxCoeff();
        const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
        loss += lse - logits(r, targets[static_cast<std::size_t>(r)]);
    }
    if (dlogits != nullptr) {
        *dlogits = probs;
        for (Eigen::Index r = 0; r < logits.rows(); ++r) {
            (*dlogits)(r, targets[static_cast<std::size_t>(r)]) -= 1.0;
        }
        *dlogits /= normalizer;
    }
    return loss / static_cast<double>(std::max<Eigen::Index>(1, logits.rows()));
}

// ---------------------------------------------------------------- attention

MultiHeadAttention::MultiHeadAttention(const std::string& name, Eigen::Index hidden, int n_heads)
    : heads(n_heads),
      query(name + ".query", hidden, hidden),
      key(name + ".key", hidden, hidden),
      value(name + ".value", hidden, hidden),
      output(name + ".output", hidden, hidden)
{
    require(n_heads > 0 && hidden % n_heads == 0, "hidden size must be divisible by the head count");
}

void MultiHeadAttention::init(Rng& rng)
{
    query.init(rng);
    key.init(rng);
    value.init(rng);
    output.init(rng);
}

void MultiHeadAttention::collect(ParameterList& out)
{
    query.collect(out);
    key.collect(out);
    value.collect(out);
    output.collect(out);
}

Matrix MultiHeadAttention::forward(const Matrix& x, Cache* cache) const
{
    const Eigen::Index hidden = x.cols();
    const Eigen::Index d = hidden / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    Matrix q = query.forward(x);
    Matrix k = key.forward(x);
    Matrix v = value.forward(x);
    Matrix context(x.rows(), hidden);
    std::vector<Matrix> probs;
    probs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        const Eigen::Index c0 = h * d;
        Matrix scores = (q.middleCols(c0, d) * k.middleCols(c0, d).transpose()) * scale;
        Matrix p = softmax_rows(scores);
        context.middleCols(c0, d).noalias() = p * v.middleCols(c0, d);
        probs.push_back(std::move(p));
    }
    Matrix y = output.forward(context);
    if (cache != nullptr) {
        cache->input = x;
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->probs = std::move(probs);
        cache->context = std::move(context);
    }
    return y;
}

Matrix MultiHeadAttention::backward(const Cache& cache, const Matrix& dy)
{
    const Eigen::Index hidden = cache.input.cols();
    const Eigen::Index d = hidden / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    const Matrix dcontext = output.backward(cache.context, dy);
    Matrix dq(cache.q.rows(), hidden);
    Matrix dk(cache.k.rows(), hidden);
    Matrix dv(cache.v.rows(), hidden);
    for (int h = 0; h < heads; ++h) {
        const Eigen::Index c0 = h * d;
        const Matrix& p = cache.probs[static_cast<std::size_t>(h)];
        const auto dctx = dcontext.middleCols(c0, d);
        dv.middleCols(c0, d).noalias() = p.transpose() * dctx;
        const Matrix dp = dctx * cache.v.middleCols(c0, d).transpose();
        Matrix ds = p.cwiseProduct(dp);
        const Eigen::VectorXd row_dot = ds.rowwise().sum();
        ds -= p.cwiseProduct(row_dot.replicate(1, p.cols()));
        ds *= scale;
        dq.middleCols(c0, d).noalias() = ds * cache.k.middleCols(c0, d);
        dk.middleCols(c0, d).noalias() = ds.transpose() * cache.q.middleCols(c0, d);
    }
    Matrix dx = query.backward(cache.input, dq);
    dx += key.backward(cache.input, dk);
    dx += value.backward(cache.input, dv);
    return dx;
}

// ---------------------------------------------------------------- blocks

TransformerBlock::TransformerBlock(const std::string& name, Eigen::Index hidden, int heads, Eigen::Index ff)
    : ln1(name + ".ln1", hidden),
      attn(name + ".attn", hidden, heads),
      ln2(name + ".ln2", hidden),
      ff_in(name + ".ff_in", hidden, ff),
      ff_out(name + ".ff_out", ff, hidden)
{
}

void TransformerBlock::init(Rng& rng)
{
    attn.init(rng);
    ff_in.init(rng);
    ff_out.init(rng);
}

void TransformerBlock::collect(ParameterList& out)
{
    ln1.collect(out);
    attn.collect(out);
    ln2.collect(out);
    ff_in.collect(out);
    ff_out.collect(out);
}

Matrix TransformerBlock::forward(const Matrix& x, Cache* cache, double dropout, Rng* rng) const
{
    const bool train = rng != nullptr && dropout > 0.0;
    LayerNorm::Cache ln1_cache;
    Matrix ln1_out = ln1.forward(x, cache ? &ln1_cache : nullptr);
    MultiHeadAttention::Cache attn_cache;
    Matrix attn_out = attn.forward(ln1_out, cache ? &attn_cache : nullptr);
    Matrix drop1;
    if (train) {
        drop1 = dropout_mask(attn_out.rows(), attn_out.cols(), dropout, *rng);
        attn_out = attn_out.cwiseProduct(drop1);
    }
    Matrix mid = x + attn_out;

    LayerNorm::Cache ln2_cache;
    Matrix ln2_out = ln2.forward(mid, cache ? &ln2_cache : nullptr);
    Matrix ff_pre = ff_in.forward(ln2_out);
    Matrix ff_act = gelu(ff_pre);
    Matrix ff = ff_out.forward(ff_act);
    Matrix drop2;
    if (train) {
        drop2 = dropout_mask(ff.rows(), ff.cols(), dropout, *rng);
        ff = ff.cwiseProduct(drop2);
    }
    Matrix y = mid + ff;
    if (cache != nullptr) {
        cache->ln1 = std::move(ln1_cache);
        cache->ln1_out = std::move(ln1_out);
        cache->attn = std::move(attn_cache);
        cache->drop1 = std::move(drop1);
        cache->mid = std::move(mid);
        cache->ln2 = std::move(ln2_cache);
        cache->ln2_out = std::move(ln2_out);
        cache->ff_pre = std::move(ff_pre);
        cache->ff_act = std::move(ff_act);
        cache->drop2 = std::move(drop2);
    }
    return y;
}

Matrix TransformerBlock::backward(const Cache& cache, const Matrix& dy)
{
    Matrix dff = dy;
    if (cache.drop2.size() > 0) {
        dff = dff.cwiseProduct(cache.drop2);
    }
    const Matrix dff_act = ff_out.backward(cache.ff_act, dff);
    const Matrix dff_pre = gelu_backward(cache.ff_pre, dff_act);
    const Matrix dln2 = ff_in.backward(cache.ln2_out, dff_pre);
    Matrix dmid = dy + ln2.backward(cache.ln2, dln2);

    Matrix dattn = dmid;
    if (cache.drop1.size() > 0) {
        dattn = dattn.cwiseProduct(cache.drop1);
    }
    const Matrix dln1 = attn.backward(cache.attn, dattn);
    return dmid + ln1.backward(cache.ln1, dln1);
}

TransformerStack::TransformerStack(const std::string& name, int layers, Eigen::Index hidden, int heads,
                                   Eigen::Index ff)
    : final_norm(name + ".final_ln", hidden)
{
    for (int i = 0; i < layers; ++i) {
        blocks.emplace_back(name + ".block" + std::to_string(i), hidden, heads, ff);
    }
}

void TransformerStack::init(Rng& rng)
{
    for (auto& block : blocks) {
        block.init(rng);
    }
}

void TransformerStack::collect(ParameterList& out)
{
    for (auto& block : blocks) {
        block.collect(out);
    }
    final_norm.collect(out);
}

Matrix TransformerStack::forward(const Matrix& x, Cache* cache, double dropout, Rng* rng) const
{
    if (cache != nullptr) {
        cache->blocks.resize(blocks.size());
    }
    Matrix h = x;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        h = blocks[i].forward(h, cache ? &cache->blocks[i] : nullptr, dropout, rng);
    }
    return final_norm.forward(h, cache ? &cache->final_ln : nullptr);
}

Matrix TransformerStack::backward(const Cache& cache, const Matrix& dy)
{
    Matrix d = final_norm.backward(cache.final_ln, dy);
    for (std::size_t i = blocks.size(); i-- > 0;) {
        d = blocks[i].backward(cache.blocks[i], d);
    }
    return d;
}

} // namespace deauville::nn
