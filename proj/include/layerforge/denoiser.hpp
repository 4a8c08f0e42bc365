#pragma once

// Multi-branch noise predictor.
//
// One small U-Net is shared by every branch of a sample: the global branch,
// K foreground branches and the background branch. Branches differ through a
// role embedding, per-role attention adapters and their own prompts. Inside
// each attention block the global branch runs first; foreground and background
// branches then read its cross-attention map (reweighting) and its hidden
// states (partial joint self-attention).

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "layerforge/attention.hpp"
#include "layerforge/autograd.hpp"
#include "layerforge/synthdata.hpp"

namespace layerforge::denoiser {

enum class Role { Global, Foreground, Background };

struct BranchId {
  Role role = Role::Global;
  int index = 0;  // 1..K for foregrounds, 0 otherwise

  static BranchId global() { return {Role::Global, 0}; }
  static BranchId foreground(int i) { return {Role::Foreground, i}; }
  static BranchId background() { return {Role::Background, 0}; }
  auto operator<=>(const BranchId&) const = default;
};

std::string to_string(BranchId id);
// Accepts "global", "background"/"bg" and "fg<i>".
BranchId parse_branch(const std::string& text);

// Branch order within one sample: GLOBAL, FG1..FGK, BACKGROUND.
std::vector<BranchId> branch_order(int k);

struct DenoiserConfig {
  int image_size = 32;
  std::vector<int> widths{64, 128};            // per resolution, from image_size down
  std::vector<int> attention_resolutions{16, 8};
  int reweight_resolution = 16;
  int heads = 4;
  int d_txt = 64;
  int k_max = 3;
  int groups = 8;
  bool reweighting_on = true;
  bool joint_attention_on = true;
  bool couple_global = false;       // let layer branches push gradients into global hidden states
  bool self_attention_bias = false;  // also add log(M̂ + eps) to layer self-attention logits
  double mask_threshold = 0.5;
  double mask_sigma = 1.0;  // latent pixels at 16x16, scaled with resolution

  // Bottleneck resolution = image_size >> widths.size().
  std::vector<int> resolutions() const;
  void validate() const;
  bool operator==(const DenoiserConfig&) const = default;
};

nlohmann::json to_json(const DenoiserConfig& c);
// Unknown keys are rejected; missing keys keep their defaults.
DenoiserConfig config_from_json(const nlohmann::json& j);

class Denoiser {
 public:
  explicit Denoiser(DenoiserConfig cfg, std::uint64_t seed = 0);

  const DenoiserConfig& config() const { return cfg_; }
  void set_toggles(bool reweighting_on, bool joint_attention_on);

  const std::vector<std::pair<std::string, ag::Var>>& parameters() const { return params_; }
  const ag::Var& param(const std::string& name) const;
  std::size_t parameter_count() const;

  // Attention block names in evaluation order, e.g. "down1.attn".
  std::vector<std::string> attention_blocks() const;
  int block_resolution(const std::string& block) const;

  void save(const std::filesystem::path& path) const;
  // Throws CheckpointNotFound when the file is missing, FormatError when it is
  // not a checkpoint of a supported version.
  static Denoiser load(const std::filesystem::path& path);

 private:
  Denoiser() = default;
  ag::Var& add_param(const std::string& name, Tensor value);

  DenoiserConfig cfg_;
  std::vector<std::pair<std::string, ag::Var>> params_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// prompts

struct PromptEmbedding {
  ag::Var values;          // [s, d_txt]
  std::vector<bool> pad;   // PAD positions
  std::vector<int> subject_candidates;  // non-PAD positions
};

// Token embedding plus learned positional offsets.
PromptEmbedding encode_prompt(const Denoiser& net, const std::vector<int>& tokens);

// Token sequence a branch is conditioned on.
const std::vector<int>& branch_tokens(const synth::PromptSpec& prompt, BranchId id);

// ---------------------------------------------------------------------------
// probes

struct ProbeSelector {
  std::string block;
  BranchId branch;
  bool self_weights = true;  // the joint self-attention weights are large
};

struct ProbeCapture {
  ProbeSelector selector;
  int sample = 0;
  int resolution = 0;
  attention::AttentionMap<float> global_cross;  // M^g, every head and token
  attention::AttentionMap<float> cross;         // branch cross-attention before substitution
  attention::AttentionMap<float> cross_used;    // after substitution
  attention::TokenMap<float> global_map;        // M_i^g (head-averaged subject column)
  attention::TokenMap<float> layer_map;         // M_i^l
  attention::TokenMap<float> reweighted;        // M̂_i, empty unless reweighting ran
  std::optional<attention::SpatialMask<float>> mask;
  std::vector<float> self_weights;  // heads x positions x (global positions + positions)
  bool degenerate = false;
};

// Checks the selector against the configuration; throws ValidationError on
// unknown blocks or branches outside 1..K_max.
ProbeSelector register_attention_probe(const DenoiserConfig& cfg, const std::string& block, BranchId branch);

// ---------------------------------------------------------------------------
// forward

// A batch of samples that all have K foregrounds. Rows of `x` are grouped per
// sample in branch_order(k).
struct BatchInput {
  int k = 0;
  ag::Var x;                               // [B * (K + 2), 4, H, W]
  std::vector<int> timesteps;              // per sample
  std::vector<synth::PromptSpec> prompts;  // per sample
  std::optional<float> mask_override;       // replaces every derived mask value (testing)
};

struct ForwardOutput {
  ag::Var eps;  // same shape as the input
  std::vector<ProbeCapture> probes;
  int degenerate_reweights = 0;
};

ForwardOutput forward(const Denoiser& net, const BatchInput& in, const std::vector<ProbeSelector>& probes = {});

// Single-sample convenience form keyed by branch.
std::map<BranchId, Tensor> forward_multi_branch(const Denoiser& net, const std::map<BranchId, Tensor>& noisy, int t,
                                                const synth::PromptSpec& prompt,
                                                const std::vector<ProbeSelector>& probes = {},
                                                std::vector<ProbeCapture>* captured = nullptr);

// One branch on its own, with no coupling to any other branch.
Tensor forward_single_branch(const Denoiser& net, const Tensor& noisy, int t, BranchId id,
                             const std::vector<int>& tokens);

}  // namespace layerforge::denoiser
