#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <vector>

#include "sarfuse/data_model.hpp"
#include "sarfuse/encoders.hpp"
#include "sarfuse/geosample.hpp"

namespace sarfuse {

enum class Objective { None, Vae, T2v, Csf };

Objective objective_from_string(const std::string& s);
std::string to_string(Objective o);

// Augmentation ramp: zero through the warm-up, then a linear climb to full
// intensity over the ramp.
struct CurriculumSchedule {
    int warmup_epochs = 5;
    int ramp_epochs = 10;

    double intensity(int epoch) const {
        if (epoch < warmup_epochs) return 0.0;
        return std::min(1.0, double(epoch - warmup_epochs + 1) / double(ramp_epochs));
    }
};

struct PretrainConfig {
    Objective objective = Objective::Vae;
    EncoderVariant encoder = EncoderVariant::ResNet18;
    int epochs = 20;
    int batch_size = 32;
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    uint64_t seed = 7;
    double margin = 1.0;
    double kl_weight = 1e-3;
    double temperature_km = 0.0;  // 0 = mean neighbor distance of the graph
    int latent_channels = 32;
    BatchNormOpts bn;
};

void validate_pretrain_config(const PretrainConfig& cfg);

// Diagonal-Gaussian KL against the standard normal: per-batch mean of
// sum 0.5*(mu^2 + e^logvar - 1 - logvar). Value-level convenience.
double kl_divergence(const Tensor& mu, const Tensor& logvar);

// Batched hinge over pooled embeddings [B,D]:
// mean over B of max(0, |za-zn| - |za-zd| + margin).
double triplet_loss(const Tensor& z_a, const Tensor& z_n, const Tensor& z_d, double margin);
Var triplet_loss_graph(Tape& t, Var z_a, Var z_n, Var z_d, double margin);

// Variational head over the encoder embedding: 1x1 reductions to mu/logvar
// on the 8x8 grid, decoder back to the normalized 14-channel input.
class VaeHead : public Module {
public:
    // embed_channels -> latent L at the same spatial grid; decoder channel
    // schedule halves per UpBlock from decoder_channels down to
    // decoder_channels/16, then 1x1 to out_channels.
    VaeHead(int embed_channels, int latent_channels, int out_channels, uint64_t seed,
            BatchNormOpts bn = {});

    Var forward(Tape& t, Var x) override;  // decode-only path (not used in training)
    Var mu(Tape& t, Var embed) { return mu_conv_->forward(t, embed); }
    Var logvar(Tape& t, Var embed) { return logvar_conv_->forward(t, embed); }
    Var decode(Tape& t, Var z);

private:
    std::unique_ptr<Conv2d> mu_conv_, logvar_conv_, latent_expand_, out_conv_;
    std::vector<std::unique_ptr<UpBlock>> ups_;
};

// Encoder + VaeHead bundle used by the VAE objective.
struct VaeModel : Module {
    VaeModel(EncoderVariant variant, int latent_channels, uint64_t seed, BatchNormOpts bn = {});
    Var forward(Tape& t, Var x) override;
    Encoder encoder;
    VaeHead head;
};

struct VaeLossParts {
    Var loss;
    double total = 0.0;
    double recon = 0.0;
    double kl = 0.0;
};

// encode -> reparameterize with the supplied unit-normal noise -> decode;
// loss = MSE(decoded, x) + kl_weight * KL. Throws on non-finite loss.
VaeLossParts vae_loss(Tape& t, VaeModel& model, const Tensor& x_norm, const Tensor& noise,
                      double kl_weight);

// One augmented 128x128 view of a normalized [14,H,W] patch. intensity 0 is
// exactly the center crop; band dropout (p = 0.2*intensity, at least one
// band kept), crop jitter, brightness/contrast on all channels, and
// saturation/hue on the S2 RGB bands all scale with intensity.
Tensor csf_augment(const Tensor& x_norm, double intensity, uint64_t seed);

// Two views per sample through the shared encoder; the negative for sample i
// is the second view of sample (i+1) mod B. Returns the scalar graph node.
Var csf_loss(Tape& t, Encoder& encoder, const std::vector<const Tensor*>& batch, double intensity,
             double margin, uint64_t seed);

struct PretrainResult {
    std::filesystem::path checkpoint;
    std::filesystem::path metrics_csv;
    std::vector<double> epoch_losses;
};

// Full pretraining loop. `deterministic` suppresses the wall-clock column in
// the metrics CSV so reruns are byte-identical. The t2v objective requires a
// neighbor graph whose points align with manifest entry order.
PretrainResult pretrain_run(const PretrainConfig& cfg, const Manifest& manifest,
                            const std::filesystem::path& data_root, const NeighborGraph* graph,
                            const std::filesystem::path& out_dir, bool deterministic = true);

// Center crop of a [C,H,W] tensor to [C,size,size].
Tensor center_crop(const Tensor& x, int size);

// Loads and normalizes every manifest sample (in entry order).
std::vector<Tensor> load_normalized_patches(const Manifest& manifest,
                                            const std::filesystem::path& data_root,
                                            const BandStats& stats);

} // namespace sarfuse
