#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "clims/types.hpp"

namespace clims {

using EmbeddingVector = Vec;  // unit Euclidean norm after encoding

/// Cosine similarity in [-1,1]; errors on zero-norm input.
real cosine_similarity(const Vec& u, const Vec& v);

/// Pixel signature of a concept: an RGB anchor color plus a tolerance on
/// chromaticity distance. Membership of a pixel is
///   exp(-d^2 / (2 tol^2)) for d <= 3 tol, else 0,
/// where d is the Euclidean distance between the pixel's chromaticity
/// (rgb / (r+g+b)) and the anchor's. Working in chromaticity makes coverage
/// exactly linear in the mask values applied to an image.
struct ConceptSignature {
  Eigen::Vector3d color = Eigen::Vector3d::Zero();
  real tolerance = 0.1;
};

real signature_membership(const ConceptSignature& sig, const Eigen::Vector3d& rgb);

struct ConceptSpec {
  std::string name;
  ConceptSignature signature;
  /// Co-occurring concepts blended into this concept's text embedding
  /// (name -> mix weight). Mirrors the contextual entanglement of a
  /// web-trained image-text model: the text of an object also matches
  /// imagery of backgrounds it habitually appears with.
  std::map<std::string, real> context;
};

/// Concept vectors are the orthonormal columns of Q from a seeded Gaussian
/// matrix; one extra column serves as the null embedding, so it is orthogonal
/// to every concept vector by construction.
struct ConceptTable {
  int dim = 16;
  std::uint64_t seed = 0;
  std::vector<ConceptSpec> concepts;
  Mat vectors;      // dim x n, column c = concept c
  Vec null_vector;  // dim

  int concept_count() const { return static_cast<int>(concepts.size()); }
  int index_of(const std::string& name) const;  // -1 when absent
};

ConceptTable make_concept_table(int dim, std::uint64_t seed, std::vector<ConceptSpec> concepts);
ConceptTable load_concept_table(const std::string& path);
void save_concept_table(const ConceptTable& table, const std::string& path);

/// Concept table matching the bundled synthetic benchmark palette.
ConceptTable default_concept_table(std::uint64_t seed = 7, real context_mix = 0.35);

/// Frozen image/text encoder pair.
class ImageTextMatcher {
 public:
  virtual ~ImageTextMatcher() = default;
  virtual int dim() const = 0;
  virtual EmbeddingVector encode_image(const Image& image) const = 0;
  virtual EmbeddingVector encode_text(const std::string& prompt) const = 0;
};

/// Deterministic differentiable matcher over a ConceptTable.
///
/// Image embedding: coverage w_c = sum_p membership_c(pixel) * luminance(pixel),
/// raw = sum_c w_c * vec(c), output = raw/|raw|, or the null embedding when
/// |raw| < 1e-8. Because membership depends only on chromaticity and luminance
/// is linear in intensity, encode_image(mask_out(X, U)) equals
/// normalize(vectors * concept_density(X) * U) exactly; the training path uses
/// that identity.
class SyntheticMatcher : public ImageTextMatcher {
 public:
  explicit SyntheticMatcher(ConceptTable table);

  int dim() const override { return table_.dim; }
  const ConceptTable& table() const { return table_; }

  EmbeddingVector encode_image(const Image& image) const override;
  EmbeddingVector encode_text(const std::string& prompt) const override;
  EmbeddingVector null_embedding() const { return table_.null_vector; }

  /// n x (H*W): per-concept density of each pixel (membership * luminance).
  Mat concept_density(const Image& image) const;

  /// Coverage vector of an image (= concept_density * 1).
  Vec coverage(const Image& image) const;

  /// Text embedding expressed as coefficients over the concept basis
  /// (unit norm). Used by the loss path, which works in coverage space.
  Vec text_coefficients(const std::string& prompt) const;

  /// dL/d(pixels) (H*W x 3) for dL/d(embedding); zero on the null branch.
  Mat encode_image_backward(const Image& image, const Vec& embedding_grad) const;

  static constexpr real kNullThreshold = 1e-8;

 private:
  int match_concept(const std::string& prompt) const;
  ConceptTable table_;
};

/// Configuration of an adapter around an external pretrained image-text
/// model: masked images are bilinearly resized to the model's square input
/// and channel-normalized before encoding. The backend itself is injected;
/// none is bundled, so encode calls without one fail loudly. Excluded from
/// the acceptance suite.
struct ExternalMatcherConfig {
  std::string model_identifier;
  int input_size = 224;
  Eigen::Vector3d channel_mean = {0.48145466, 0.4578275, 0.40821073};
  Eigen::Vector3d channel_std = {0.26862954, 0.26130258, 0.27577711};
};

class ExternalMatcherAdapter : public ImageTextMatcher {
 public:
  using ImageBackend = std::function<Vec(const Mat& preprocessed)>;  // (S*S) x 3 in, D out
  using TextBackend = std::function<Vec(const std::string&)>;

  explicit ExternalMatcherAdapter(ExternalMatcherConfig config, int dim = 512);
  void set_backends(ImageBackend image_backend, TextBackend text_backend);

  int dim() const override { return dim_; }
  const ExternalMatcherConfig& config() const { return config_; }

  /// Resize (bilinear, half-pixel centers) + per-channel normalization.
  Mat preprocess(const Image& image) const;

  EmbeddingVector encode_image(const Image& image) const override;
  EmbeddingVector encode_text(const std::string& prompt) const override;

 private:
  ExternalMatcherConfig config_;
  int dim_;
  ImageBackend image_backend_;
  TextBackend text_backend_;
};

}  // namespace clims
