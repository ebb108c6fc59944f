#include "lgedet/model.hpp"

#include <fstream>
#include <stdexcept>

namespace lgedet {

namespace {

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::runtime_error(msg);
}

void push(std::vector<std::pair<std::string, Tensor>>& out, const std::string& name,
          const Tensor& t) {
  if (t.defined()) out.emplace_back(name, t);
}

void collect_iteration(std::vector<std::pair<std::string, Tensor>>& out, const std::string& pfx,
                       const LgeIterationParams& it) {
  push(out, pfx + ".wenc.reduce", it.wenc.reduce_kernel);
  push(out, pfx + ".henc.down", it.henc.down_kernel);
  push(out, pfx + ".henc.wq", it.henc.wq);
  push(out, pfx + ".henc.wk", it.henc.wk);
  push(out, pfx + ".henc.wv", it.henc.wv);
  push(out, pfx + ".henc.wo", it.henc.wo);
  push(out, pfx + ".henc.ffn1", it.henc.ffn_w1);
  push(out, pfx + ".henc.ffn2", it.henc.ffn_w2);
  push(out, pfx + ".wdec.fw", it.wdec.fw_kernel);
  push(out, pfx + ".wdec.depth1", it.wdec.depth_kernel1);
  push(out, pfx + ".wdec.depth2", it.wdec.depth_kernel2);
  push(out, pfx + ".wdec.decode", it.wdec.decode_kernel);
  push(out, pfx + ".wdec.fp", it.wdec.fp_projection);
  push(out, pfx + ".stub", it.stub_kernel);
  push(out, pfx + ".s1proj", it.s1_projection);
  push(out, pfx + ".bridge", it.bridge_kernel);
}

}  // namespace

Model make_model(const ModelConfig& cfg, uint64_t seed) {
  check(cfg.channels >= 4 && cfg.channels % 4 == 0, "make_model: channels must be a multiple of 4");
  check(cfg.num_stages >= 1, "make_model: at least one stage required");
  check(cfg.lge_iterations >= 1, "make_model: at least one enhancement iteration required");
  Model m;
  m.config = cfg;
  Rng rng(Rng::derive(seed, 0x30de1));
  m.stem1 = Tensor::randn({3, 3, kVoxelChannels, cfg.channels}, rng,
                          std::sqrt(2.0 / (9.0 * kVoxelChannels)), cfg.dtype, true);
  m.stem2 = Tensor::randn({3, 3, cfg.channels, cfg.channels}, rng,
                          std::sqrt(2.0 / (9.0 * cfg.channels)), cfg.dtype, true);
  for (int s = 0; s < cfg.num_stages; ++s) {
    StageParams sp;
    sp.lge = make_lge_params(cfg.variant, cfg.channels, cfg.num_heads, cfg.lge_iterations, rng,
                             cfg.dtype);
    sp.head = make_head_params(cfg.channels, cfg.num_classes, rng, cfg.dtype);
    sp.decode = make_decode_params(cfg.channels, cfg.num_classes, cfg.decode_radius, rng,
                                   cfg.dtype);
    m.stages.push_back(std::move(sp));
  }
  return m;
}

Tensor forward_stem(const Model& m, const Tensor& voxels) {
  check(voxels.defined() && voxels.rank() == 3 && voxels.extent(2) == kVoxelChannels,
        "forward_stem: input must be [H,W," + std::to_string(kVoxelChannels) + "]");
  return relu(conv2d(relu(conv2d(voxels, m.stem1, 1, 1)), m.stem2, 1, 1));
}

std::vector<std::pair<std::string, Tensor>> named_parameters(const Model& m) {
  std::vector<std::pair<std::string, Tensor>> out;
  push(out, "stem.conv1", m.stem1);
  push(out, "stem.conv2", m.stem2);
  for (size_t s = 0; s < m.stages.size(); ++s) {
    const std::string sp = "stage" + std::to_string(s);
    const StageParams& st = m.stages[s];
    for (size_t i = 0; i < st.lge.per_iteration.size(); ++i)
      collect_iteration(out, sp + ".lge" + std::to_string(i), st.lge.per_iteration[i]);
    push(out, sp + ".head.conv1", st.head.conv1);
    push(out, sp + ".head.conv2", st.head.conv2);
    push(out, sp + ".decode.wq", st.decode.wq);
    push(out, sp + ".decode.wk", st.decode.wk);
    push(out, sp + ".decode.wv", st.decode.wv);
    push(out, sp + ".decode.wo", st.decode.wo);
    push(out, sp + ".decode.reg_w", st.decode.reg_w);
    push(out, sp + ".decode.reg_b", st.decode.reg_b);
    push(out, sp + ".decode.cls_w", st.decode.cls_w);
    push(out, sp + ".decode.cls_b", st.decode.cls_b);
  }
  return out;
}

void save_checkpoint(const Model& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  check(os.good(), "save_checkpoint: cannot open " + path);
  const auto params = named_parameters(m);
  os.write("LGCK", 4);
  const uint32_t version = 1;
  os.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const uint64_t count = params.size();
  os.write(reinterpret_cast<const char*>(&count), sizeof(count));
  for (const auto& [name, tensor] : params) {
    check(name.size() <= 0xffff, "save_checkpoint: parameter name too long");
    const uint16_t len = static_cast<uint16_t>(name.size());
    os.write(reinterpret_cast<const char*>(&len), sizeof(len));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    save_tensor(os, tensor);
  }
  check(os.good(), "save_checkpoint: write failed for " + path);
}

void load_checkpoint(Model& m, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(is.good(), "load_checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  check(is.good() && std::string(magic, 4) == "LGCK", "load_checkpoint: bad magic in " + path);
  uint32_t version = 0;
  is.read(reinterpret_cast<char*>(&version), sizeof(version));
  check(version == 1, "load_checkpoint: unsupported version");
  uint64_t count = 0;
  is.read(reinterpret_cast<char*>(&count), sizeof(count));
  auto params = named_parameters(m);
  check(count == params.size(), "load_checkpoint: parameter count mismatch (model config differs)");
  for (uint64_t i = 0; i < count; ++i) {
    uint16_t len = 0;
    is.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string name(len, '\0');
    is.read(name.data(), len);
    check(is.good() && name == params[i].first,
          "load_checkpoint: parameter order mismatch at '" + name + "'");
    Tensor loaded = load_tensor(is);
    Tensor& dst = params[i].second;
    check(dst.dtype() == DType::F32, "load_checkpoint: float32 models only");
    check(loaded.shape() == dst.shape(), "load_checkpoint: shape mismatch for '" + name + "'");
    auto src = loaded.f32();
    auto d = dst.f32();
    std::copy(src.begin(), src.end(), d.begin());
  }
}

}  // namespace lgedet
