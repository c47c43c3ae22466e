#pragma once
// Dense and convolutional blocks with quantizers, PIM MACs, batch norm and
// activations, plus the reverse pass implementing the GSTE contract with
// forward (eta) and backward (xi) rescaling.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pimqat/nonideal.hpp"
#include "pimqat/pim.hpp"
#include "pimqat/random.hpp"
#include "pimqat/tensor.hpp"

namespace pimqat::nn {

enum class Activation { clipped_relu_01, relu, identity };
enum class Pool { none, max2, global_avg };
enum class LayerKind { dense, conv };
enum class XiMode { measured, fixed };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

/// Raised when a forward pass produces NaN/Inf.
class NumericalError : public Error {
public:
    NumericalError(std::size_t layer, const std::string& what)
        : Error("non-finite values in layer " + std::to_string(layer) + " " + what), layer_(layer) {}
    std::size_t layer() const { return layer_; }

private:
    std::size_t layer_;
};

struct BNState {
    std::vector<double> gamma, beta, running_mean, running_var;
    double momentum = 0.1;
    double eps = 1e-5;
    std::size_t batch_size_last = 0;

    // Calibration accumulators.
    std::vector<double> calib_mean, calib_var;
    std::size_t calib_batches = 0;

    explicit BNState(std::size_t channels = 0)
        : gamma(channels, 1.0), beta(channels, 0.0), running_mean(channels, 0.0), running_var(channels, 1.0) {}
    std::size_t channels() const { return gamma.size(); }
};

enum class BnMode {
    running,    ///< normalize with running statistics
    train,      ///< batch statistics, running stats updated with momentum
    calibrate,  ///< batch statistics, accumulated for a plain-mean refresh
    batch,      ///< batch statistics, nothing updated
};

struct BNCache {
    std::size_t B = 0, C = 0, S = 0;
    bool batch_stats = true;  ///< false: running statistics were used, which are constants here
    std::vector<double> xhat, inv_std;
};

/// z laid out [B, C, S]. Writes y; fills cache when given.
void bn_forward(const std::vector<double>& z, std::size_t B, std::size_t C, std::size_t S, BNState& bn, BnMode mode,
                std::vector<double>& y, BNCache* cache);

/// Exact batch-norm backward (all batch-statistic terms kept).
void bn_backward(const std::vector<double>& grad_y, const BNCache& cache, const std::vector<double>& gamma,
                 std::vector<double>& grad_z, std::vector<double>& grad_gamma, std::vector<double>& grad_beta);

/// Evaluation-time interface applied to PIM layers.
struct EvalInterface {
    std::optional<Resolution> b_imc;  ///< overrides the trained b_imc when set
    std::shared_ptr<const nonideal::NonIdealModel> nonideal;
};

struct ForwardContext {
    BnMode bn = BnMode::running;
    bool keep_cache = false;  ///< needed for backward
    bool want_exact = false;  ///< compute the exact MAC alongside (xi, rho)
    std::uint64_t tick = 0;   ///< noise stream step
    const EvalInterface* iface = nullptr;
};

struct LayerCache {
    Shape in_shape, out_shape;
    std::size_t P = 0, K = 0, OH = 1, OW = 1;
    std::vector<std::uint8_t> act_codes;  // [P, K]
    std::vector<double> act_real;          // [P, K], full-precision mode
    std::vector<std::uint8_t> in_pass;     // STE mask of the input, 1 inside [0, 1]
    std::vector<double> w_eff;             // [O, K], s * q_hat or latent W
    BNCache bn;
    std::vector<double> pre_act;           // [B, O, S]
    std::vector<std::uint32_t> pool_arg;
    bool valid = false;
};

struct Layer {
    LayerKind kind = LayerKind::dense;
    std::size_t in_ch = 0, out_ch = 0, ksize = 1, pad = 0;
    bool quantize = true;   ///< false: full-precision weights and inputs
    int b_w = 4, b_a = 4;
    bool pim_layer = false;  ///< PIM MACs (else exact digital MACs)
    pim::PimConfig cfg;      ///< scheme, grouping, b_imc; forward_scale is eta for every layer
    bool has_bias = false, has_bn = true;
    Activation act = Activation::clipped_relu_01;
    Pool pool = Pool::none;
    XiMode xi_mode = XiMode::measured;
    double xi_fixed = 1.0;

    Tensor W;  ///< [O, C, k, k] or [O, F]
    std::vector<double> bias;
    BNState bn;

    double last_xi = 1.0;   ///< xi used by the last backward
    double last_rho = 1.0;  ///< std_ratio(pim, exact, out_ch) of the last forward with exact values

    std::vector<double> grad_W, grad_bias, grad_gamma, grad_beta;
    LayerCache cache;

    std::size_t kernel_area() const { return ksize * ksize; }
    std::size_t fan_in() const { return in_ch * kernel_area(); }
    double eta() const { return cfg.forward_scale; }
};

/// y = pool(phi(BN(eta * s * MAC(Q(W), q(x))))) for one block.
Tensor forward_layer(Layer& L, const Tensor& x, std::size_t index, const ForwardContext& ctx);

/// Returns grad_x; fills L.grad_*.
Tensor backward_layer(Layer& L, const Tensor& grad_y);

struct ParamRef {
    std::string name;
    std::vector<double>* value;
    std::vector<double>* grad;
};

struct Model {
    std::string arch;  ///< "mlp", "cnn4" or "stack"
    std::vector<Layer> layers;
    std::uint64_t seed = 0;

    Tensor forward(const Tensor& x, const ForwardContext& ctx);
    Tensor backward(const Tensor& grad_logits);
    std::vector<ParamRef> parameters();
    void zero_grad();
};

struct PimSpec {
    pim::Scheme scheme = pim::Scheme::bit_serial;
    Resolution b_imc;
    int dac_bits = 1;
    std::size_t unit_in_channels = 16;
    std::size_t unit_out_channels = 8;
    std::optional<double> eta;  ///< default from the scheme table
    XiMode xi_mode = XiMode::measured;
    double xi_fixed = 1.0;
    bool pim = true;            ///< false: exact MACs during training (conventional QAT baseline)
};

void kaiming_init(Layer& L, Rng& rng);

/// conv(in->w, exact) + maxpool | conv(w->w) + maxpool | conv(w->2w) + maxpool | conv(2w->2w) + avgpool | fc (exact, bias)
Model make_cnn4(std::size_t in_channels, std::size_t width, std::size_t classes, const PimSpec& spec,
                std::uint64_t seed, int b_w = 4, int b_a = 4);

/// dense(in->h0, exact) | dense(h_i->h_{i+1}, PIM)... | fc (exact, bias)
Model make_mlp(std::size_t in_features, const std::vector<std::size_t>& hidden, std::size_t classes,
               const PimSpec& spec, std::uint64_t seed, int b_w = 4, int b_a = 4);

/// Softmax cross-entropy over [B, classes]; returns mean loss and writes grad / correct.
double softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels, Tensor& grad, std::size_t& correct);

std::vector<int> argmax_rows(const Tensor& logits);

/// sqrt(sum_c Var_c(a) / sum_c Var_c(b)) for row-major [rows, cols] arrays, where
/// Var_c is the variance of column c over the rows. With cols = O this is the
/// per-output-neuron spread over the batch that BN normalizes. 1 when the
/// denominator is 0.
double std_ratio(const std::vector<double>& a, const std::vector<double>& b, std::size_t cols = 1);

void save_checkpoint(const Model& m, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);
std::string checkpoint_json(const Model& m);
Model checkpoint_from_json(const std::string& text);

}  // namespace pimqat::nn
