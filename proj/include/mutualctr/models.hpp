#pragma once

#include "mutualctr/data.hpp"
#include "mutualctr/tape.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace mutualctr::models {

enum class Architecture { deepfm, dcn, pnn, fibinet };

Architecture architecture_from_string(const std::string& name);
std::string architecture_name(Architecture arch);

/// Structural hyperparameters shared by all four architectures.
struct ModelConfig {
    std::size_t embedding_dim = 16;
    std::vector<std::size_t> tower{400, 200, 100};
    std::size_t cross_depth = 3;  // dcn only
    std::size_t senet_ratio = 3;  // fibinet only
};

/// Field structure the parameter shapes depend on; derived from a
/// FeatureSchema and stored in checkpoints so a model can be rebuilt
/// without the schema file.
struct FieldInfo {
    std::vector<std::uint32_t> cat_vocab_sizes;
    std::size_t num_fields = 0;

    std::size_t total_fields() const { return cat_vocab_sizes.size() + num_fields; }
};

/// One architecture instance: its parameters plus the forward pass
/// mapping a Batch to per-example click probabilities.
///
/// Parameters live in a fixed-size vector built once in the
/// constructor; forward() registers them on the caller's tape, so
/// gradients come back through Tape::backward. Probabilities are
/// returned as a [B x 1] Var (reshape to taste).
class ModelInstance {
public:
    /// Fresh model with seeded initialization: embeddings and per-token
    /// first-order tables uniform(-0.01, 0.01) with the OOV row zeroed,
    /// dense matrices Glorot-uniform, biases zero.
    ModelInstance(Architecture arch, ModelConfig cfg, const data::FeatureSchema& schema, std::uint64_t init_seed);

    /// Zero-initialized skeleton used by the checkpoint loader.
    ModelInstance(Architecture arch, ModelConfig cfg, FieldInfo fields, std::string schema_hash);

    ModelInstance(const ModelInstance&) = delete;
    ModelInstance& operator=(const ModelInstance&) = delete;
    ModelInstance(ModelInstance&&) = default;
    ModelInstance& operator=(ModelInstance&&) = default;

    /// Click probabilities for the batch, shape [B x 1], values in (0,1).
    ad::Var forward(ad::Tape& tape, const data::Batch& batch) const;

    /// coef_embedding * sum ||embedding params||^2 + coef_dense * sum ||dense params||^2,
    /// built on the tape so it joins the training loss.
    ad::Var l2_penalty(ad::Tape& tape, double coef_embedding, double coef_dense) const;

    Architecture architecture() const { return arch_; }
    const ModelConfig& config() const { return cfg_; }
    const FieldInfo& fields() const { return fields_; }
    const std::string& schema_hash() const { return schema_hash_; }

    std::vector<ad::Parameter>& params() { return params_; }
    const std::vector<ad::Parameter>& params() const { return params_; }
    ad::Parameter& param(const std::string& id);
    const ad::Parameter& param(const std::string& id) const;

    std::size_t parameter_count() const; // total scalar count

private:
    void build_params(std::uint64_t init_seed, bool initialize);
    std::vector<ad::Var> embed(ad::Tape& tape, const data::Batch& batch) const;
    ad::Var tower_head(ad::Tape& tape, ad::Var input) const;

    ad::Var forward_deepfm(ad::Tape& tape, const data::Batch& batch) const;
    ad::Var forward_dcn(ad::Tape& tape, const data::Batch& batch) const;
    ad::Var forward_pnn(ad::Tape& tape, const data::Batch& batch) const;
    ad::Var forward_fibinet(ad::Tape& tape, const data::Batch& batch) const;

    Architecture arch_;
    ModelConfig cfg_;
    FieldInfo fields_;
    std::string schema_hash_;
    std::vector<ad::Parameter> params_;
};

// ---- architecture building blocks (exposed for direct testing) -----------

/// Second-order factorization machine term from field embeddings
/// (each [B x d]): 0.5 * sum_dims[(sum_f e_f)^2 - sum_f e_f^2], the
/// O(F*d) form of the pairwise dot-product sum. Returns [B x 1].
ad::Var fm_pairwise(ad::Tape& tape, std::span<const ad::Var> field_embeddings);

/// One DCN cross layer: x0 * (xl . w) + b + xl (per-row scalar xl . w).
/// x0, xl are [B x D]; w is [D x 1]; b is [D].
ad::Var cross_layer(ad::Tape& tape, ad::Var x0, ad::Var xl, ad::Var w, ad::Var b);

/// SENET reweighting: squeeze each field to its embedding mean,
/// excite with relu(relu(z W1) W2), scale each field embedding by its
/// excitation weight.
std::vector<ad::Var> senet_reweight(ad::Tape& tape, std::span<const ad::Var> field_embeddings, ad::Var w1,
                                    ad::Var w2);

/// Field-all bilinear interaction: (e_i W) ⊙ e_j for all i < j, one
/// shared [d x d] W. Returns the F(F-1)/2 products, each [B x d].
std::vector<ad::Var> bilinear_interaction(ad::Tape& tape, std::span<const ad::Var> field_embeddings, ad::Var w);

} // namespace mutualctr::models
