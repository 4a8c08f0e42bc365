#include "layerforge/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <numbers>
#include <random>
#include <set>

#include "layerforge/errors.hpp"
#include "layerforge/image_io.hpp"

namespace layerforge::denoiser {

namespace at = attention;
using at::Matrix;

// ---------------------------------------------------------------------------
// branch ids

std::string to_string(BranchId id) {
  switch (id.role) {
    case Role::Global: return "global";
    case Role::Background: return "background";
    case Role::Foreground: return "fg" + std::to_string(id.index);
  }
  return "?";
}

BranchId parse_branch(const std::string& text) {
  if (text == "global") return BranchId::global();
  if (text == "background" || text == "bg") return BranchId::background();
  if (text.size() > 2 && text.rfind("fg", 0) == 0 &&
      std::all_of(text.begin() + 2, text.end(), [](char c) { return c >= '0' && c <= '9'; }))
    return BranchId::foreground(std::stoi(text.substr(2)));
  throw ValidationError("unknown branch '" + text + "' (expected global, background or fg<i>)");
}

std::vector<BranchId> branch_order(int k) {
  std::vector<BranchId> out{BranchId::global()};
  for (int i = 1; i <= k; ++i) out.push_back(BranchId::foreground(i));
  out.push_back(BranchId::background());
  return out;
}

// ---------------------------------------------------------------------------
// config

std::vector<int> DenoiserConfig::resolutions() const {
  std::vector<int> r;
  for (std::size_t l = 0; l <= widths.size(); ++l) r.push_back(image_size >> l);
  return r;
}

void DenoiserConfig::validate() const {
  auto fail = [](const std::string& m) { throw ValidationError("model: " + m); };
  if (widths.empty()) fail("widths must not be empty");
  if (image_size < 4 || image_size > 64) fail("image_size must lie in [4, 64]");
  if (image_size % (1 << widths.size()) != 0) fail("image_size must be divisible by 2^len(widths)");
  if (heads < 1) fail("heads must be positive");
  if (groups < 1) fail("groups must be positive");
  for (int w : widths) {
    if (w < 1) fail("widths must be positive");
    if (w % heads != 0) fail("every width must be divisible by heads");
    if (w % groups != 0) fail("every width must be divisible by groups");
  }
  if (d_txt < 1) fail("d_txt must be positive");
  if (k_max < 1 || k_max > synth::kMaxLayers) fail("k_max must lie in [1, " + std::to_string(synth::kMaxLayers) + "]");
  const auto res = resolutions();
  for (int a : attention_resolutions)
    if (std::find(res.begin(), res.end(), a) == res.end()) fail("attention resolution " + std::to_string(a) + " is not a model resolution");
  if (std::find(attention_resolutions.begin(), attention_resolutions.end(), reweight_resolution) == attention_resolutions.end())
    fail("reweight_resolution must be one of attention_resolutions");
  if (!(mask_threshold > 0.0 && mask_threshold < 1.0)) fail("mask_threshold must lie in (0, 1)");
  if (mask_sigma < 0.0) fail("mask_sigma must be non-negative");
}

nlohmann::json to_json(const DenoiserConfig& c) {
  return {{"image_size", c.image_size},
          {"widths", c.widths},
          {"attention_resolutions", c.attention_resolutions},
          {"reweight_resolution", c.reweight_resolution},
          {"heads", c.heads},
          {"d_txt", c.d_txt},
          {"k_max", c.k_max},
          {"groups", c.groups},
          {"reweighting_on", c.reweighting_on},
          {"joint_attention_on", c.joint_attention_on},
          {"couple_global", c.couple_global},
          {"self_attention_bias", c.self_attention_bias},
          {"mask_threshold", c.mask_threshold},
          {"mask_sigma", c.mask_sigma}};
}

DenoiserConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("model: expected an object");
  DenoiserConfig c;
  const auto known = to_json(c);
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.contains(it.key())) throw ValidationError("model: unknown key '" + it.key() + "'");
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
    };
    get("image_size", c.image_size);
    get("widths", c.widths);
    get("attention_resolutions", c.attention_resolutions);
    get("reweight_resolution", c.reweight_resolution);
    get("heads", c.heads);
    get("d_txt", c.d_txt);
    get("k_max", c.k_max);
    get("groups", c.groups);
    get("reweighting_on", c.reweighting_on);
    get("joint_attention_on", c.joint_attention_on);
    get("couple_global", c.couple_global);
    get("self_attention_bias", c.self_attention_bias);
    get("mask_threshold", c.mask_threshold);
    get("mask_sigma", c.mask_sigma);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("model: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// parameters

namespace {

int temb_dim(const DenoiserConfig& c) { return 4 * c.widths[0]; }

bool has_attention(const DenoiserConfig& c, int res) {
  return std::find(c.attention_resolutions.begin(), c.attention_resolutions.end(), res) != c.attention_resolutions.end();
}

// Network layout shared by construction and forward.
struct Level {
  std::string name;
  int res;
  int in_ch, out_ch;
  bool attn;
};

struct Layout {
  std::vector<Level> down, up;
  Level mid;
};

Layout layout(const DenoiserConfig& c) {
  Layout L;
  const int n = static_cast<int>(c.widths.size());
  int ch = c.widths[0];
  for (int l = 0; l < n; ++l) {
    const int res = c.image_size >> l;
    L.down.push_back({"down" + std::to_string(l), res, ch, c.widths[l], has_attention(c, res)});
    ch = c.widths[l];
  }
  const int mid_res = c.image_size >> n;
  L.mid = {"mid", mid_res, ch, ch, has_attention(c, mid_res)};
  for (int l = n - 1; l >= 0; --l) {
    const int res = c.image_size >> l;
    L.up.push_back({"up" + std::to_string(l), res, ch + c.widths[l], c.widths[l], has_attention(c, res)});
    ch = c.widths[l];
  }
  return L;
}

}  // namespace

ag::Var& Denoiser::add_param(const std::string& name, Tensor value) {
  if (index_.count(name)) throw Error("duplicate parameter " + name);
  index_[name] = params_.size();
  params_.emplace_back(name, ag::parameter(std::move(value)));
  return params_.back().second;
}

Denoiser::Denoiser(DenoiserConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  auto normal = [&](Shape shape, double stddev) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> d(0.0, stddev);
    for (float& v : t.values()) v = static_cast<float>(d(rng));
    return t;
  };
  auto fan = [&](Shape shape, double gain = 1.0) {
    std::size_t fan_in = 1;
    for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= static_cast<std::size_t>(shape[i]);
    if (shape.size() == 2) fan_in = static_cast<std::size_t>(shape[0]);
    return normal(std::move(shape), gain / std::sqrt(static_cast<double>(fan_in)));
  };
  auto norm = [&](const std::string& p, int ch) {
    add_param(p + ".g", Tensor({ch}, 1.0f));
    add_param(p + ".b", Tensor({ch}));
  };
  auto conv = [&](const std::string& p, int out, int in, int k, double gain = 1.0) {
    add_param(p + ".w", fan({out, in, k, k}, gain));
    add_param(p + ".b", Tensor({out}));
  };
  const int c0 = cfg_.widths[0], td = temb_dim(cfg_);
  auto resblock = [&](const std::string& p, int in, int out) {
    norm(p + ".gn1", in);
    conv(p + ".conv1", out, in, 3);
    add_param(p + ".t.w", fan({td, out}));
    add_param(p + ".t.b", Tensor({out}));
    norm(p + ".gn2", out);
    conv(p + ".conv2", out, out, 3, 0.5);
    if (in != out) conv(p + ".skip", out, in, 1);
  };
  auto proj = [&](const std::string& p, int ctx, int ch) {
    add_param(p + ".q", fan({ch, ch}));
    add_param(p + ".k", fan({ctx, ch}));
    add_param(p + ".v", fan({ctx, ch}));
    add_param(p + ".o", fan({ch, ch}, 0.5));
    for (const char* role : {"fg", "bg"}) {
      add_param(p + "." + role + ".q", Tensor({ch, ch}));
      add_param(p + "." + role + ".k", Tensor({ctx, ch}));
      add_param(p + "." + role + ".v", Tensor({ctx, ch}));
      add_param(p + "." + role + ".o", Tensor({ch, ch}));
    }
  };
  auto attnblock = [&](const std::string& p, int ch) {
    norm(p + ".gn1", ch);
    proj(p + ".self", ch, ch);
    add_param(p + ".share.k", fan({ch, ch}));
    add_param(p + ".share.v", fan({ch, ch}));
    norm(p + ".gn2", ch);
    proj(p + ".cross", cfg_.d_txt, ch);
  };

  add_param("tok.emb", normal({synth::token::kVocabulary, cfg_.d_txt}, 1.0));
  add_param("tok.pos", normal({synth::kSequenceLength, cfg_.d_txt}, 0.1));
  add_param("temb.w1", fan({c0, td}));
  add_param("temb.b1", Tensor({td}));
  add_param("temb.w2", fan({td, td}));
  add_param("temb.b2", Tensor({td}));
  add_param("role.emb", normal({3, td}, 0.5));
  conv("in", c0, 4, 3);
  const Layout L = layout(cfg_);
  for (std::size_t l = 0; l < L.down.size(); ++l) {
    const auto& lv = L.down[l];
    resblock(lv.name + ".res", lv.in_ch, lv.out_ch);
    if (lv.attn) attnblock(lv.name + ".attn", lv.out_ch);
    conv(lv.name + ".ds", lv.out_ch, lv.out_ch, 3);
  }
  resblock("mid.res", L.mid.in_ch, L.mid.out_ch);
  if (L.mid.attn) attnblock("mid.attn", L.mid.out_ch);
  for (const auto& lv : L.up) {
    resblock(lv.name + ".res", lv.in_ch, lv.out_ch);
    if (lv.attn) attnblock(lv.name + ".attn", lv.out_ch);
  }
  norm("out.gn", c0);
  conv("out", 4, c0, 3, 0.1);
}

void Denoiser::set_toggles(bool reweighting_on, bool joint_attention_on) {
  cfg_.reweighting_on = reweighting_on;
  cfg_.joint_attention_on = joint_attention_on;
}

const ag::Var& Denoiser::param(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("no parameter named " + name);
  return params_[it->second].second;
}

std::size_t Denoiser::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, v] : params_) n += v->value.size();
  return n;
}

std::vector<std::string> Denoiser::attention_blocks() const {
  std::vector<std::string> out;
  const Layout L = layout(cfg_);
  for (const auto& lv : L.down)
    if (lv.attn) out.push_back(lv.name + ".attn");
  if (L.mid.attn) out.push_back("mid.attn");
  for (const auto& lv : L.up)
    if (lv.attn) out.push_back(lv.name + ".attn");
  return out;
}

namespace {

int resolution_of(const DenoiserConfig& cfg, const std::string& block) {
  const Layout L = layout(cfg);
  for (const auto& lv : L.down)
    if (lv.attn && lv.name + ".attn" == block) return lv.res;
  if (L.mid.attn && block == "mid.attn") return L.mid.res;
  for (const auto& lv : L.up)
    if (lv.attn && lv.name + ".attn" == block) return lv.res;
  throw ValidationError("unknown attention block '" + block + "'");
}

}  // namespace

int Denoiser::block_resolution(const std::string& block) const { return resolution_of(cfg_, block); }

// ---------------------------------------------------------------------------
// checkpoints

namespace {

constexpr char kMagic[8] = {'L', 'F', 'D', 'N', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <class V>
void put(std::vector<std::uint8_t>& out, V v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(V));
}

struct Reader {
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;
  void need(std::size_t n) const {
    if (pos + n > bytes.size()) throw FormatError("checkpoint truncated");
  }
  template <class V>
  V get() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, bytes.data() + pos, sizeof(V));
    pos += sizeof(V);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
    pos += n;
    return s;
  }
};

}  // namespace

void Denoiser::save(const std::filesystem::path& path) const {
  std::vector<std::uint8_t> out(kMagic, kMagic + 8);
  put<std::uint32_t>(out, kCheckpointVersion);
  const std::string cfg = to_json(cfg_).dump();
  put<std::uint64_t>(out, cfg.size());
  out.insert(out.end(), cfg.begin(), cfg.end());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params_.size()));
  for (const auto& [name, v] : params_) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(v->value.rank()));
    for (int d : v->value.shape()) put<std::int32_t>(out, d);
    const auto* p = reinterpret_cast<const std::uint8_t*>(v->value.data());
    out.insert(out.end(), p, p + v->value.size() * sizeof(float));
  }
  put<std::uint32_t>(out, io::crc32(out));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  io::write_file(path, out);
}

Denoiser Denoiser::load(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) throw CheckpointNotFound("checkpoint not found: " + path.string());
  const auto bytes = io::read_file(path);
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) throw FormatError("not a checkpoint: " + path.string());
  {
    std::uint32_t stored;
    std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
    if (io::crc32(std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 4)) != stored)
      throw FormatError("checkpoint checksum mismatch: " + path.string());
  }
  Reader r{bytes, 8};
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  DenoiserConfig cfg;
  try {
    cfg = config_from_json(nlohmann::json::parse(r.str(r.get<std::uint64_t>())));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  } catch (const ValidationError& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
  Denoiser net(cfg, 0);
  const auto count = r.get<std::uint32_t>();
  if (count != net.params_.size()) throw FormatError("checkpoint tensor count does not match its config");
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str(r.get<std::uint32_t>());
    auto it = net.index_.find(name);
    if (it == net.index_.end() || !seen.insert(name).second) throw FormatError("unexpected tensor " + name);
    Tensor& dst = net.params_[it->second].second->value;
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw FormatError("bad rank for " + name);
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.get<std::int32_t>());
    if (shape != dst.shape()) throw FormatError("shape mismatch for " + name);
    const std::size_t nbytes = dst.size() * sizeof(float);
    r.need(nbytes);
    std::memcpy(dst.data(), bytes.data() + r.pos, nbytes);
    r.pos += nbytes;
  }
  if (r.pos + 4 != bytes.size()) throw FormatError("trailing bytes in checkpoint");
  return net;
}

// ---------------------------------------------------------------------------
// prompts

const std::vector<int>& branch_tokens(const synth::PromptSpec& prompt, BranchId id) {
  switch (id.role) {
    case Role::Global: return prompt.global;
    case Role::Background: return prompt.background;
    case Role::Foreground:
      if (id.index < 1 || id.index > prompt.layer_count()) throw ValidationError("no prompt for " + to_string(id));
      return prompt.layers[static_cast<std::size_t>(id.index - 1)];
  }
  throw ValidationError("bad branch");
}

namespace {

// [n * s, d_txt] embeddings for a list of sequences.
ag::Var embed_sequences(const Denoiser& net, const std::vector<const std::vector<int>*>& seqs) {
  std::vector<int> ids, pos;
  for (const auto* s : seqs) {
    if (static_cast<int>(s->size()) != synth::kSequenceLength)
      throw ValidationError("token sequences must have length " + std::to_string(synth::kSequenceLength));
    for (std::size_t i = 0; i < s->size(); ++i) {
      ids.push_back((*s)[i]);
      pos.push_back(static_cast<int>(i));
    }
  }
  return ag::add(ag::embedding(net.param("tok.emb"), ids), ag::embedding(net.param("tok.pos"), pos));
}

}  // namespace

PromptEmbedding encode_prompt(const Denoiser& net, const std::vector<int>& tokens) {
  PromptEmbedding e;
  e.values = embed_sequences(net, {&tokens});
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    e.pad.push_back(tokens[i] == synth::token::kPad);
    if (!e.pad.back()) e.subject_candidates.push_back(static_cast<int>(i));
  }
  return e;
}

ProbeSelector register_attention_probe(const DenoiserConfig& cfg, const std::string& block, BranchId branch) {
  cfg.validate();
  resolution_of(cfg, block);
  if (branch.role == Role::Foreground && (branch.index < 1 || branch.index > cfg.k_max))
    throw ValidationError("probe branch " + to_string(branch) + " outside 1.." + std::to_string(cfg.k_max));
  return {block, branch};
}

// ---------------------------------------------------------------------------
// attention ops on [n, C, H, W] feature maps

namespace {

Matrix<float> matrix_of(const Tensor& t) {
  Matrix<float> m(t.dim(0), t.dim(1));
  std::copy(t.data(), t.data() + t.size(), m.data.begin());
  return m;
}

void accumulate(const ag::Var& v, const Matrix<float>& g) {
  if (!v->requires_grad) return;
  Tensor& dst = v->grad_buffer();
  for (std::size_t i = 0; i < g.data.size(); ++i) dst[i] += g.data[i];
}

// Item i of [n, C, H, W] as a (H*W) x C matrix.
Matrix<float> tokens_of(const Tensor& x, int i) {
  const int c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Matrix<float> m(hw, c);
  const float* src = x.data() + static_cast<std::size_t>(i) * c * hw;
  for (int ch = 0; ch < c; ++ch)
    for (int p = 0; p < hw; ++p) m(p, ch) = src[static_cast<std::size_t>(ch) * hw + p];
  return m;
}

void add_tokens(Tensor& x, int i, const Matrix<float>& m) {
  const int c = x.dim(1), hw = x.dim(2) * x.dim(3);
  float* dst = x.data() + static_cast<std::size_t>(i) * c * hw;
  for (int ch = 0; ch < c; ++ch)
    for (int p = 0; p < hw; ++p) dst[static_cast<std::size_t>(ch) * hw + p] += m(p, ch);
}

Matrix<float> rows_of(const Tensor& t, int first, int count) {
  const int cols = t.dim(1);
  Matrix<float> m(count, cols);
  std::copy(t.data() + static_cast<std::size_t>(first) * cols, t.data() + static_cast<std::size_t>(first + count) * cols,
            m.data.begin());
  return m;
}

struct ProjVars {
  ag::Var q, k, v, o;
  at::ProjectionWeights<float> values(int heads) const {
    at::ProjectionWeights<float> w;
    w.heads = heads;
    w.query = matrix_of(q->value);
    w.key = matrix_of(k->value);
    w.value = matrix_of(v->value);
    w.out = matrix_of(o->value);
    return w;
  }
  void accumulate_grad(const at::ProjectionWeights<float>& g) const {
    accumulate(q, g.query);
    accumulate(k, g.key);
    accumulate(v, g.value);
    accumulate(o, g.out);
  }
  std::vector<ag::Var> list() const { return {q, k, v, o}; }
};

struct SelfItem {
  int global_item = -1;  // row in the global tensor; -1 for plain self-attention
  const at::SpatialMask<float>* mask = nullptr;
  const std::vector<float>* layer_bias = nullptr;
};

using SelfCaches = std::vector<at::JointAttentionCache<float>>;
using CrossCaches = std::vector<at::CrossAttentionCache<float>>;

ag::Var self_attention(const ag::Var& h, const ProjVars& w, int heads, const ag::Var& global, const ag::Var& kgl,
                       const ag::Var& vgl, const std::vector<SelfItem>& items, std::shared_ptr<SelfCaches>& caches_out) {
  const int n = h->value.dim(0);
  const auto pw = std::make_shared<at::ProjectionWeights<float>>(w.values(heads));
  std::shared_ptr<at::GlobalShareWeights<float>> share;
  bool any_joint = false;
  for (const auto& it : items) any_joint = any_joint || it.global_item >= 0;
  if (any_joint) share = std::make_shared<at::GlobalShareWeights<float>>(at::GlobalShareWeights<float>{matrix_of(kgl->value), matrix_of(vgl->value)});
  auto caches = std::make_shared<SelfCaches>(static_cast<std::size_t>(n));
  Tensor out(h->value.shape());
  for (int i = 0; i < n; ++i) {
    const auto& it = items[static_cast<std::size_t>(i)];
    const Matrix<float> z = tokens_of(h->value, i);
    at::JointAttentionResult<float> r;
    if (it.global_item >= 0) {
      const Matrix<float> g = tokens_of(global->value, it.global_item);
      r = at::partial_joint_self_attention(z, &g, it.mask, *pw, share.get(), it.layer_bias);
    } else {
      r = at::partial_joint_self_attention<float>(z, nullptr, nullptr, *pw, nullptr, it.layer_bias);
    }
    add_tokens(out, i, r.output);
    (*caches)[static_cast<std::size_t>(i)] = std::move(r.cache);
  }
  caches_out = caches;
  std::vector<ag::Var> parents = w.list();
  parents.push_back(h);
  if (any_joint) {
    parents.push_back(global);
    parents.push_back(kgl);
    parents.push_back(vgl);
  }
  std::vector<int> global_rows;
  for (const auto& it : items) global_rows.push_back(it.global_item);
  return ag::make_node(std::move(out), parents, [=](const Tensor& g) {
    for (int i = 0; i < n; ++i) {
      const auto gi = at::partial_joint_self_attention_backward((*caches)[static_cast<std::size_t>(i)], *pw,
                                                                global_rows[static_cast<std::size_t>(i)] >= 0 ? share.get() : nullptr,
                                                                tokens_of(g, i));
      w.accumulate_grad(gi.weights);
      if (h->requires_grad) add_tokens(h->grad_buffer(), i, gi.z);
      if (global_rows[static_cast<std::size_t>(i)] >= 0) {
        if (global->requires_grad) add_tokens(global->grad_buffer(), global_rows[static_cast<std::size_t>(i)], gi.global_hidden);
        accumulate(kgl, gi.share.key);
        accumulate(vgl, gi.share.value);
      }
    }
  });
}

// text: [n * s, d_txt] rows aligned with the items of h.
ag::Var cross_attention(const ag::Var& h, const ag::Var& text, const ProjVars& w, int heads,
                        std::vector<std::optional<at::CrossReweighting<float>>> reweighting,
                        std::shared_ptr<CrossCaches>& caches_out) {
  const int n = h->value.dim(0), s = synth::kSequenceLength;
  const auto pw = std::make_shared<at::ProjectionWeights<float>>(w.values(heads));
  auto caches = std::make_shared<CrossCaches>(static_cast<std::size_t>(n));
  Tensor out(h->value.shape());
  for (int i = 0; i < n; ++i) {
    auto r = at::cross_attention_layer<float>(tokens_of(h->value, i), rows_of(text->value, i * s, s), *pw,
                                              std::move(reweighting[static_cast<std::size_t>(i)]));
    add_tokens(out, i, r.output);
    (*caches)[static_cast<std::size_t>(i)] = std::move(r.cache);
  }
  caches_out = caches;
  std::vector<ag::Var> parents = w.list();
  parents.push_back(h);
  parents.push_back(text);
  return ag::make_node(std::move(out), parents, [=](const Tensor& g) {
    for (int i = 0; i < n; ++i) {
      // The global map is treated as a constant here.
      const auto gi = at::cross_attention_layer_backward((*caches)[static_cast<std::size_t>(i)], *pw, tokens_of(g, i));
      w.accumulate_grad(gi.weights);
      if (h->requires_grad) add_tokens(h->grad_buffer(), i, gi.x);
      if (text->requires_grad) {
        Tensor& gt = text->grad_buffer();
        const int d = gi.text.cols;
        for (int r = 0; r < s; ++r)
          for (int c = 0; c < d; ++c) gt[static_cast<std::size_t>(i * s + r) * d + c] += gi.text(r, c);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// network

struct Item {
  BranchId id;
  int sample = 0;
  int global_item = -1;  // item index of this sample's global branch, -1 if absent
  int timestep = 0;
  const std::vector<int>* tokens = nullptr;
  int layer_subject = -1;   // foregrounds only
  int global_subject = -1;  // foregrounds only
};

struct Context {
  const Denoiser& net;
  const DenoiserConfig& cfg;
  std::vector<Item> items;
  ag::Var temb;  // [n, temb_dim], time + role
  ag::Var text;  // [n * s, d_txt]
  const std::vector<ProbeSelector>* probes = nullptr;
  std::vector<ProbeCapture>* captured = nullptr;
  int degenerate = 0;
  std::optional<float> mask_override;

  const ag::Var& p(const std::string& name) const { return net.param(name); }
};

ag::Var norm(const Context& c, const std::string& name, const ag::Var& x) {
  return ag::group_norm(x, c.p(name + ".g"), c.p(name + ".b"), c.cfg.groups);
}

ag::Var conv(const Context& c, const std::string& name, const ag::Var& x, int stride = 1) {
  const int k = c.p(name + ".w")->value.dim(2);
  return ag::conv2d(x, c.p(name + ".w"), c.p(name + ".b"), stride, k / 2);
}

ag::Var resblock(const Context& c, const std::string& name, const ag::Var& x) {
  ag::Var h = conv(c, name + ".conv1", ag::silu(norm(c, name + ".gn1", x)));
  h = ag::add_channel_vector(h, ag::linear(ag::silu(c.temb), c.p(name + ".t.w"), c.p(name + ".t.b")));
  h = conv(c, name + ".conv2", ag::silu(norm(c, name + ".gn2", h)));
  const ag::Var skip = h->value.dim(1) == x->value.dim(1) ? x : conv(c, name + ".skip", x);
  return ag::add(skip, h);
}

ProjVars role_weights(const Context& c, const std::string& prefix, Role role) {
  ProjVars base{c.p(prefix + ".q"), c.p(prefix + ".k"), c.p(prefix + ".v"), c.p(prefix + ".o")};
  if (role == Role::Global) return base;
  const std::string r = prefix + (role == Role::Foreground ? ".fg" : ".bg");
  return {ag::add(base.q, c.p(r + ".q")), ag::add(base.k, c.p(r + ".k")), ag::add(base.v, c.p(r + ".v")),
          ag::add(base.o, c.p(r + ".o"))};
}

std::vector<int> text_rows(const std::vector<int>& items) {
  std::vector<int> rows;
  for (int i : items)
    for (int j = 0; j < synth::kSequenceLength; ++j) rows.push_back(i * synth::kSequenceLength + j);
  return rows;
}

std::vector<float> flatten_self_weights(const at::JointAttentionCache<float>& cache) {
  std::vector<float> out;
  for (int h = 0; h < cache.heads; ++h) {
    const auto m = at::joint_attention_weights(cache, h);
    out.insert(out.end(), m.data.begin(), m.data.end());
  }
  return out;
}

ag::Var attnblock(Context& c, const std::string& name, int res, const ag::Var& x) {
  const auto& cfg = c.cfg;
  const int heads = cfg.heads;
  const int n = static_cast<int>(c.items.size());
  const ag::Var h = norm(c, name + ".gn1", x);

  std::vector<int> g_idx, f_idx, b_idx;
  std::vector<int> global_pos(static_cast<std::size_t>(n), -1);  // item -> position within g_idx
  for (int i = 0; i < n; ++i) {
    const Role r = c.items[static_cast<std::size_t>(i)].id.role;
    if (r == Role::Global) {
      global_pos[static_cast<std::size_t>(i)] = static_cast<int>(g_idx.size());
      g_idx.push_back(i);
    } else if (r == Role::Foreground) {
      f_idx.push_back(i);
    } else {
      b_idx.push_back(i);
    }
  }

  std::vector<ag::Var> outputs;
  std::vector<int> order;

  // GLOBAL: plain self-attention, then cross-attention whose map is cached.
  ag::Var hg;
  std::shared_ptr<CrossCaches> g_cross;
  std::shared_ptr<SelfCaches> g_self;
  if (!g_idx.empty()) {
    hg = ag::take_rows(h, g_idx);
    ag::Var xg = ag::take_rows(x, g_idx);
    xg = ag::add(xg, self_attention(hg, role_weights(c, name + ".self", Role::Global), heads, nullptr, nullptr, nullptr,
                                    std::vector<SelfItem>(g_idx.size()), g_self));
    xg = ag::add(xg, cross_attention(norm(c, name + ".gn2", xg), ag::take_rows(c.text, text_rows(g_idx)),
                                     role_weights(c, name + ".cross", Role::Global), heads,
                                     std::vector<std::optional<at::CrossReweighting<float>>>(g_idx.size()), g_cross));
    outputs.push_back(xg);
    order.insert(order.end(), g_idx.begin(), g_idx.end());
  }

  const bool reweight_here = cfg.reweighting_on && res == cfg.reweight_resolution;
  const bool joint = cfg.joint_attention_on;
  const float sigma = static_cast<float>(cfg.mask_sigma * res / 16.0);

  // Per-item global token map, binary and blurred masks.
  std::vector<at::TokenMap<float>> gmap(static_cast<std::size_t>(n));
  std::vector<std::optional<at::SpatialMask<float>>> binary(static_cast<std::size_t>(n)), mask(static_cast<std::size_t>(n));
  for (int i : f_idx) {
    const Item& it = c.items[static_cast<std::size_t>(i)];
    if (it.global_item < 0) continue;
    const auto& cache = (*g_cross)[static_cast<std::size_t>(global_pos[static_cast<std::size_t>(it.global_item)])];
    gmap[static_cast<std::size_t>(i)] = at::extract_token_map(cache.raw, it.global_subject);
    auto b = at::binarize_token_map(gmap[static_cast<std::size_t>(i)], res, res, static_cast<float>(cfg.mask_threshold));
    mask[static_cast<std::size_t>(i)] = at::gaussian_blur(b, sigma);
    binary[static_cast<std::size_t>(i)] = std::move(b);
  }
  for (int i : b_idx) {
    const Item& it = c.items[static_cast<std::size_t>(i)];
    if (it.global_item < 0) continue;
    std::vector<at::SpatialMask<float>> fg;
    for (int j : f_idx)
      if (c.items[static_cast<std::size_t>(j)].sample == it.sample && binary[static_cast<std::size_t>(j)])
        fg.push_back(*binary[static_cast<std::size_t>(j)]);
    binary[static_cast<std::size_t>(i)] = at::background_mask(fg, res, res);
    mask[static_cast<std::size_t>(i)] = at::gaussian_blur(*binary[static_cast<std::size_t>(i)], sigma);
  }
  if (c.mask_override)
    for (auto& m : mask)
      if (m) {
        std::fill(m->values.begin(), m->values.end(), *c.mask_override);
        m->binary = *c.mask_override == 0.0f || *c.mask_override == 1.0f;
      }

  // Layer branches: joint self-attention against the cached global hidden
  // states, then cross-attention with the subject column reweighted.
  const ag::Var gsrc = hg ? (cfg.couple_global ? hg : ag::detach(hg)) : nullptr;
  std::map<int, std::shared_ptr<SelfCaches>> self_caches;
  std::map<int, std::shared_ptr<CrossCaches>> cross_caches;
  std::map<int, std::pair<int, std::size_t>> where;  // item -> (role group, position)
  for (int gi = 0; gi < static_cast<int>(g_idx.size()); ++gi) where[g_idx[static_cast<std::size_t>(gi)]] = {0, static_cast<std::size_t>(gi)};
  for (Role role : {Role::Foreground, Role::Background}) {
    const auto& idx = role == Role::Foreground ? f_idx : b_idx;
    if (idx.empty()) continue;
    const ProjVars self_w = role_weights(c, name + ".self", role);
    const ProjVars cross_w = role_weights(c, name + ".cross", role);
    const ag::Var hl = ag::take_rows(h, idx);

    std::vector<std::vector<float>> bias(idx.size());
    if (role == Role::Foreground && cfg.self_attention_bias && reweight_here) {
      // Preview of this block's reweighted column on the self-attention input.
      const auto cw = cross_w.values(heads);
      for (std::size_t k = 0; k < idx.size(); ++k) {
        const Item& it = c.items[static_cast<std::size_t>(idx[k])];
        if (gmap[static_cast<std::size_t>(idx[k])].empty()) continue;
        const auto map = at::cross_attention_map(tokens_of(hl->value, static_cast<int>(k)),
                                                 rows_of(c.text->value, idx[k] * synth::kSequenceLength, synth::kSequenceLength), cw);
        const auto rw = at::reweight_layer_map(gmap[static_cast<std::size_t>(idx[k])], at::extract_token_map(map, it.layer_subject));
        for (float v : rw.reweighted) bias[k].push_back(std::log(v + 1e-8f));
      }
    }

    std::vector<SelfItem> self_items(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const Item& it = c.items[static_cast<std::size_t>(idx[k])];
      if (!bias[k].empty()) self_items[k].layer_bias = &bias[k];
      if (joint && it.global_item >= 0 && mask[static_cast<std::size_t>(idx[k])]) {
        self_items[k].global_item = global_pos[static_cast<std::size_t>(it.global_item)];
        self_items[k].mask = &*mask[static_cast<std::size_t>(idx[k])];
      }
    }
    std::shared_ptr<SelfCaches> sc;
    ag::Var xl = ag::take_rows(x, idx);
    const bool any_joint = std::any_of(self_items.begin(), self_items.end(), [](const SelfItem& s) { return s.global_item >= 0; });
    xl = ag::add(xl, self_attention(hl, self_w, heads, any_joint ? gsrc : nullptr,
                                    any_joint ? c.p(name + ".share.k") : nullptr,
                                    any_joint ? c.p(name + ".share.v") : nullptr, self_items, sc));

    std::vector<std::optional<at::CrossReweighting<float>>> rw(idx.size());
    if (role == Role::Foreground && reweight_here)
      for (std::size_t k = 0; k < idx.size(); ++k) {
        const Item& it = c.items[static_cast<std::size_t>(idx[k])];
        if (!gmap[static_cast<std::size_t>(idx[k])].empty())
          rw[k] = at::CrossReweighting<float>{gmap[static_cast<std::size_t>(idx[k])], it.layer_subject};
      }
    std::shared_ptr<CrossCaches> cc;
    xl = ag::add(xl, cross_attention(norm(c, name + ".gn2", xl), ag::take_rows(c.text, text_rows(idx)), cross_w, heads,
                                     std::move(rw), cc));
    for (const auto& cache : *cc) c.degenerate += cache.degenerate ? 1 : 0;
    const int group = role == Role::Foreground ? 1 : 2;
    self_caches[group] = sc;
    cross_caches[group] = cc;
    for (std::size_t k = 0; k < idx.size(); ++k) where[idx[k]] = {group, k};
    outputs.push_back(xl);
    order.insert(order.end(), idx.begin(), idx.end());
  }
  self_caches[0] = g_self;
  cross_caches[0] = g_cross;

  // Probes.
  if (c.probes && c.captured)
    for (const auto& sel : *c.probes) {
      if (sel.block != name) continue;
      for (int i = 0; i < n; ++i) {
        const Item& it = c.items[static_cast<std::size_t>(i)];
        if (it.id != sel.branch) continue;
        const auto [group, pos] = where.at(i);
        const auto& cross = (*cross_caches.at(group))[pos];
        ProbeCapture cap;
        cap.selector = sel;
        cap.sample = it.sample;
        cap.resolution = res;
        cap.cross = cross.raw;
        cap.cross_used = cross.used;
        if (sel.self_weights) cap.self_weights = flatten_self_weights((*self_caches.at(group))[pos]);
        if (it.global_item >= 0) cap.global_cross = (*g_cross)[static_cast<std::size_t>(global_pos[static_cast<std::size_t>(it.global_item)])].raw;
        if (it.id.role == Role::Foreground) {
          cap.global_map = gmap[static_cast<std::size_t>(i)];
          cap.layer_map = at::extract_token_map(cross.raw, it.layer_subject);
          if (cross.reweighting) cap.reweighted = cross.reweighted;
          cap.degenerate = cross.degenerate;
        }
        cap.mask = mask[static_cast<std::size_t>(i)];
        c.captured->push_back(std::move(cap));
      }
    }

  // Restore item order.
  ag::Var stacked = outputs.size() == 1 ? outputs[0] : ag::concat_rows(outputs);
  std::vector<int> inverse(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) inverse[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] = k;
  bool identity = true;
  for (int k = 0; k < n; ++k) identity = identity && inverse[static_cast<std::size_t>(k)] == k;
  return identity ? stacked : ag::take_rows(stacked, inverse);
}

Tensor timestep_features(const std::vector<Item>& items, int dim) {
  Tensor t({static_cast<int>(items.size()), dim});
  const int half = dim / 2;
  for (std::size_t i = 0; i < items.size(); ++i)
    for (int k = 0; k < half; ++k) {
      const double f = std::exp(-std::log(10000.0) * k / half);
      const double a = items[i].timestep * f;
      t[i * dim + k] = static_cast<float>(std::sin(a));
      t[i * dim + half + k] = static_cast<float>(std::cos(a));
    }
  return t;
}

ag::Var run(Context& c, const ag::Var& x) {
  const auto& cfg = c.cfg;
  if (x->value.rank() != 4 || x->value.dim(1) != 4 || x->value.dim(2) != cfg.image_size || x->value.dim(3) != cfg.image_size)
    throw DimensionError("denoiser input must be [N, 4, " + std::to_string(cfg.image_size) + ", " +
                         std::to_string(cfg.image_size) + "], got " + shape_string(x->value.shape()));
  if (x->value.dim(0) != static_cast<int>(c.items.size())) throw DimensionError("denoiser input rows do not match branches");

  std::vector<const std::vector<int>*> seqs;
  std::vector<int> roles;
  for (const auto& it : c.items) {
    seqs.push_back(it.tokens);
    roles.push_back(static_cast<int>(it.id.role));
  }
  c.text = embed_sequences(c.net, seqs);
  ag::Var t = ag::constant(timestep_features(c.items, cfg.widths[0]));
  t = ag::linear(t, c.p("temb.w1"), c.p("temb.b1"));
  t = ag::linear(ag::silu(t), c.p("temb.w2"), c.p("temb.b2"));
  c.temb = ag::add(t, ag::embedding(c.p("role.emb"), roles));

  const Layout L = layout(cfg);
  ag::Var h = conv(c, "in", x);
  std::vector<ag::Var> skips;
  for (const auto& lv : L.down) {
    h = resblock(c, lv.name + ".res", h);
    if (lv.attn) h = attnblock(c, lv.name + ".attn", lv.res, h);
    skips.push_back(h);
    h = conv(c, lv.name + ".ds", h, 2);
  }
  h = resblock(c, "mid.res", h);
  if (L.mid.attn) h = attnblock(c, "mid.attn", L.mid.res, h);
  for (const auto& lv : L.up) {
    h = ag::concat_channels(ag::upsample2x(h), skips.back());
    skips.pop_back();
    h = resblock(c, lv.name + ".res", h);
    if (lv.attn) h = attnblock(c, lv.name + ".attn", lv.res, h);
  }
  return conv(c, "out", ag::silu(norm(c, "out.gn", h)));
}

}  // namespace

ForwardOutput forward(const Denoiser& net, const BatchInput& in, const std::vector<ProbeSelector>& probes) {
  const auto& cfg = net.config();
  if (in.k < 0 || in.k > cfg.k_max)
    throw ValidationError("K = " + std::to_string(in.k) + " exceeds K_max = " + std::to_string(cfg.k_max));
  const std::size_t samples = in.prompts.size();
  if (in.timesteps.size() != samples) throw DimensionError("one timestep per sample is required");
  for (const auto& sel : probes) net.block_resolution(sel.block);
  Context c{net, cfg, {}, nullptr, nullptr, &probes, nullptr, 0, std::nullopt};
  ForwardOutput out;
  c.captured = &out.probes;
  c.mask_override = in.mask_override;
  for (std::size_t s = 0; s < samples; ++s) {
    const auto& prompt = in.prompts[s];
    synth::validate(prompt);
    if (prompt.layer_count() != in.k) throw ValidationError("prompt has " + std::to_string(prompt.layer_count()) + " layers, batch K is " + std::to_string(in.k));
    const int global_item = static_cast<int>(c.items.size());
    for (BranchId id : branch_order(in.k)) {
      Item it;
      it.id = id;
      it.sample = static_cast<int>(s);
      it.global_item = global_item;
      it.timestep = in.timesteps[s];
      it.tokens = &branch_tokens(prompt, id);
      if (id.role == Role::Foreground) {
        it.layer_subject = prompt.layer_subject[static_cast<std::size_t>(id.index - 1)];
        it.global_subject = prompt.global_subject[static_cast<std::size_t>(id.index - 1)];
      }
      c.items.push_back(it);
    }
  }
  out.eps = run(c, in.x);
  out.degenerate_reweights = c.degenerate;
  return out;
}

std::map<BranchId, Tensor> forward_multi_branch(const Denoiser& net, const std::map<BranchId, Tensor>& noisy, int t,
                                                const synth::PromptSpec& prompt, const std::vector<ProbeSelector>& probes,
                                                std::vector<ProbeCapture>* captured) {
  const int k = prompt.layer_count();
  const auto order = branch_order(k);
  for (BranchId id : order)
    if (!noisy.count(id)) throw ValidationError("missing branch " + to_string(id));
  if (noisy.size() != order.size()) throw ValidationError("unexpected branches for K = " + std::to_string(k));
  const Shape item = noisy.begin()->second.shape();
  std::vector<float> data;
  for (BranchId id : order) {
    const Tensor& x = noisy.at(id);
    if (x.shape() != item) throw DimensionError("branch " + to_string(id) + " has shape " + shape_string(x.shape()));
    data.insert(data.end(), x.storage().begin(), x.storage().end());
  }
  Shape batch{static_cast<int>(order.size())};
  batch.insert(batch.end(), item.begin(), item.end());
  ag::NoGradGuard guard;
  BatchInput in{k, ag::constant(Tensor(batch, std::move(data))), {t}, {prompt}, std::nullopt};
  auto out = forward(net, in, probes);
  if (captured) *captured = std::move(out.probes);
  std::map<BranchId, Tensor> result;
  const std::size_t per = shape_size(item);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const float* src = out.eps->value.data() + i * per;
    result[order[i]] = Tensor(item, std::vector<float>(src, src + per));
  }
  return result;
}

Tensor forward_single_branch(const Denoiser& net, const Tensor& noisy, int t, BranchId id, const std::vector<int>& tokens) {
  if (noisy.rank() != 3) throw DimensionError("single-branch input must be [4, H, W]");
  Shape batch{1};
  batch.insert(batch.end(), noisy.shape().begin(), noisy.shape().end());
  ag::NoGradGuard guard;
  Context c{net, net.config(), {}, nullptr, nullptr, nullptr, nullptr, 0, std::nullopt};
  Item it;
  it.id = id;
  it.timestep = t;
  it.tokens = &tokens;
  c.items.push_back(it);
  auto eps = run(c, ag::constant(Tensor(batch, noisy.storage())));
  return eps->value.reshaped(noisy.shape());
}

}  // namespace layerforge::denoiser
