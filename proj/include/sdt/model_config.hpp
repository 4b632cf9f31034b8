#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

namespace sdt {

// Layers per block for the sparse inter-block connections. The unbounded
// value disables cross-block connections entirely (residuals stay on).
class BlockSize {
 public:
  constexpr BlockSize() = default;
  constexpr explicit BlockSize(std::size_t layers) : layers_(layers) {}
  static constexpr BlockSize unbounded() { return BlockSize(); }

  constexpr bool is_unbounded() const { return layers_ == 0; }
  constexpr std::size_t layers() const { return layers_; }
  std::string to_string() const { return is_unbounded() ? "inf" : std::to_string(layers_); }

  friend constexpr bool operator==(BlockSize, BlockSize) = default;

 private:
  std::size_t layers_ = 0;
};

struct ModelConfig {
  std::size_t d_model = 32;
  std::size_t n_heads = 4;
  std::size_t d_ff = 64;
  std::size_t enc_layers = 4;
  std::size_t dec_layers = 1;
  // Applied as residual, attention and relu dropout.
  double dropout = 0.1;
  bool rpr_enabled = false;
  std::size_t rpr_clip_k = 8;
  std::size_t vocab_size = 0;
  bool shared_embeddings = true;
  BlockSize block_size = BlockSize::unbounded();
  // LayerNorm after the linear block combination.
  bool combiner_norm = true;
  double layer_norm_eps = 1e-5;

  // Throws Error(kConfig) naming the offending field.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Partition of encoder layers 1..N into consecutive groups of p layers.
class BlockTopology {
 public:
  BlockTopology(std::size_t depth, BlockSize block_size);

  std::size_t depth() const noexcept { return depth_; }
  // False for the unbounded block size: no combiner exists at all.
  bool connected() const noexcept { return !block_size_.is_unbounded(); }
  std::size_t block_count() const noexcept { return blocks_.size(); }
  // 1-based [first, last] layer range of block b (1-based).
  std::pair<std::size_t, std::size_t> block(std::size_t b) const { return blocks_.at(b - 1); }
  // 1-based block index holding 1-based layer j.
  std::size_t block_of(std::size_t layer) const;
  bool is_block_end(std::size_t layer) const;

 private:
  std::size_t depth_;
  BlockSize block_size_;
  std::vector<std::pair<std::size_t, std::size_t>> blocks_;
};

}  // namespace sdt
