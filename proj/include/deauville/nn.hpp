#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "deauville/rng.hpp"

namespace deauville::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::Matrix<double, 1, Eigen::Dynamic, Eigen::RowMajor>;

struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;
    Matrix adam_m;
    Matrix adam_v;
    bool frozen = false;

    void reset(std::string param_name, Eigen::Index rows, Eigen::Index cols);
    void zero_grad() { grad.setZero(); }
};

using ParameterList = std::vector<Parameter*>;

void init_normal(Parameter& p, double stddev, Rng& rng);
double grad_norm(const ParameterList& params);
void zero_grads(const ParameterList& params);
/// Round every value to the nearest float so a float32 save/load is exact.
void quantize_to_float(const ParameterList& params);
bool all_finite(const ParameterList& params);

class Adam {
public:
    explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps)
    {
    }

    /// One update of every non-frozen parameter; moments live on the parameter.
    void step(const ParameterList& params);
    std::int64_t steps() const noexcept { return t_; }

private:
    double lr_;
    double beta1_;
    double beta2_;
    double eps_;
    std::int64_t t_ = 0;
};

// Little-endian float32 tensor blob plus a name/shape manifest.
struct TensorInfo {
    std::string name;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    std::size_t offset = 0;
};

std::vector<TensorInfo> write_tensors(const std::filesystem::path& blob_path, const ParameterList& params);
void read_tensors(const std::filesystem::path& blob_path, const std::vector<TensorInfo>& manifest,
                  const ParameterList& params);

class Linear {
public:
    Linear() = default;
    Linear(const std::string& name, Eigen::Index in, Eigen::Index out);

    void init(Rng& rng);
    Matrix forward(const Matrix& x) const;
    /// Accumulates weight gradients; returns d input.
    Matrix backward(const Matrix& x, const Matrix& dy);
    Matrix backward_input_only(const Matrix& dy) const;
    void collect(ParameterList& out) { out.push_back(&weight); out.push_back(&bias); }

    Parameter weight; // in x out
    Parameter bias;   // 1 x out
};

class LayerNorm {
public:
    struct Cache {
        Matrix normalized;
        Eigen::VectorXd inv_std;
    };

    LayerNorm() = default;
    LayerNorm(const std::string& name, Eigen::Index dim);

    Matrix forward(const Matrix& x, Cache* cache) const;
    Matrix backward(const Cache& cache, const Matrix& dy);
    void collect(ParameterList& out) { out.push_back(&gamma); out.push_back(&beta); }

    Parameter gamma;
    Parameter beta;
    double eps = 1e-5;
};

Matrix gelu(const Matrix& x);
Matrix gelu_backward(const Matrix& x, const Matrix& dy);

/// Inverted dropout mask (scaled by 1/(1-rate)); all ones when rate is 0.
Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng);

class MultiHeadAttention {
public:
    struct Cache {
        Matrix input;
        Matrix q;
        Matrix k;
        Matrix v;
        std::vector<Matrix> probs;
        Matrix context;
    };

    MultiHeadAttention() = default;
    MultiHeadAttention(const std::string& name, Eigen::Index hidden, int heads);

    void init(Rng& rng);
    Matrix forward(const Matrix& x, Cache* cache) const;
    Matrix backward(const Cache& cache, const Matrix& dy);
    void collect(ParameterList& out);

    int heads = 1;
    Linear query;
    Linear key;
    Linear value;
    Linear output;
};

/// Pre-norm block: x + attn(ln(x)), then h + ff(ln(h)).
class TransformerBlock {
public:
    struct Cache {
        LayerNorm::Cache ln1;
        Matrix ln1_out;
        MultiHeadAttention::Cache attn;
        Matrix drop1;
        Matrix mid;
        LayerNorm::Cache ln2;
        Matrix ln2_out;
        Matrix ff_pre;
        Matrix ff_act;
        Matrix drop2;
    };

    TransformerBlock() = default;
    TransformerBlock(const std::string& name, Eigen::Index hidden, int heads, Eigen::Index ff);

    void init(Rng& rng);
    Matrix forward(const Matrix& x, Cache* cache, double dropout, Rng* rng) const;
    Matrix backward(const Cache& cache, const Matrix& dy);
    void collect(ParameterList& out);

    LayerNorm ln1;
    MultiHeadAttention attn;
    LayerNorm ln2;
    Linear ff_in;
    Linear ff_out;
};

class TransformerStack {
public:
    struct Cache {
        std::vector<TransformerBlock::Cache> blocks;
        LayerNorm::Cache final_ln;
    };

    TransformerStack() = default;
    TransformerStack(const std::string& name, int layers, Eigen::Index hidden, int heads, Eigen::Index ff);

    void init(Rng& rng);
    /// Training mode when rng is non-null (dropout active).
    Matrix forward(const Matrix& x, Cache* cache, double dropout, Rng* rng) const;
    Matrix backward(const Cache& cache, const Matrix& dy);
    void collect(ParameterList& out);

    std::vector<TransformerBlock> blocks;
    LayerNorm final_norm;
};

/// Numerically stable row softmax.
Matrix softmax_rows(const Matrix& logits);

/// Mean cross-entropy of rows against integer targets; fills dlogits
/// (already divided by `normalizer`) when requested.
double cross_entropy(const Matrix& logits, const std::vector<int>& targets, double normalizer, Matrix* dlogits);

} // namespace deauville::nn
