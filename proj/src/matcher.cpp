#include "clims/matcher.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>

#include "clims/palette.hpp"
#include "clims/rng.hpp"

namespace clims {

using nlohmann::json;

real cosine_similarity(const Vec& u, const Vec& v) {
  require(u.size() == v.size(), "cosine: dimension mismatch");
  const real nu = u.norm(), nv = v.norm();
  require(nu > 0 && nv > 0, "cosine: zero-norm input");
  real s = u.dot(v) / (nu * nv);
  if (s > 1) s = 1;
  if (s < -1) s = -1;
  return s;
}

real signature_membership(const ConceptSignature& sig, const Eigen::Vector3d& rgb) {
  const real pixel_sum = rgb.sum();
  if (pixel_sum <= 0) return 0;
  const real anchor_sum = sig.color.sum();
  require(anchor_sum > 0, "concept signature: anchor color must have positive intensity");
  const Eigen::Vector3d d = rgb / pixel_sum - sig.color / anchor_sum;
  const real dist2 = d.squaredNorm();
  const real cutoff = 3.0 * sig.tolerance;
  if (dist2 > cutoff * cutoff) return 0;
  return std::exp(-dist2 / (2.0 * sig.tolerance * sig.tolerance));
}

int ConceptTable::index_of(const std::string& name) const {
  for (int c = 0; c < concept_count(); ++c)
    if (concepts[static_cast<std::size_t>(c)].name == name) return c;
  return -1;
}

ConceptTable make_concept_table(int dim, std::uint64_t seed, std::vector<ConceptSpec> concepts) {
  const int n = static_cast<int>(concepts.size());
  require(n >= 1, "concept table: need at least one concept");
  require(dim >= n + 1, "concept table: dim must exceed concept count (null vector needs a column)");
  for (int c = 0; c < n; ++c) {
    const auto& spec = concepts[static_cast<std::size_t>(c)];
    require(!spec.name.empty(), "concept table: empty concept name");
    require(spec.signature.tolerance > 0, "concept table: tolerance must be > 0");
    require(spec.signature.color.allFinite() && spec.signature.color.sum() > 0,
            "concept table: invalid signature color");
    for (int c2 = 0; c2 < c; ++c2)
      require(concepts[static_cast<std::size_t>(c2)].name != spec.name,
              "concept table: duplicate concept \"" + spec.name + "\"");
  }

  Rng rng(splitmix64(seed ^ 0xc0ffee11ULL));
  Mat gaussian(dim, n + 1);
  for (Eigen::Index i = 0; i < gaussian.rows(); ++i)
    for (Eigen::Index j = 0; j < gaussian.cols(); ++j) gaussian(i, j) = rng.normal();
  Eigen::HouseholderQR<Mat> qr(gaussian);
  Mat q = qr.householderQ() * Mat::Identity(dim, n + 1);

  ConceptTable table;
  table.dim = dim;
  table.seed = seed;
  table.concepts = std::move(concepts);
  table.vectors = q.leftCols(n);
  table.null_vector = q.col(n);

  for (const auto& spec : table.concepts)
    for (const auto& [ctx_name, weight] : spec.context) {
      require(table.index_of(ctx_name) >= 0,
              "concept table: context refers to unknown concept \"" + ctx_name + "\"");
      require(weight >= 0, "concept table: context weight must be >= 0");
    }
  return table;
}

ConceptTable load_concept_table(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "concept table: cannot open \"" + path + "\"");
  json j = json::parse(in);
  std::vector<ConceptSpec> concepts;
  for (const auto& item : j.at("concepts")) {
    ConceptSpec spec;
    spec.name = item.at("name").get<std::string>();
    const auto color = item.at("color").get<std::vector<real>>();
    require(color.size() == 3, "concept table: color must have three components");
    spec.signature.color = Eigen::Vector3d(color[0], color[1], color[2]);
    spec.signature.tolerance = item.at("tolerance").get<real>();
    if (item.contains("context"))
      for (const auto& ctx : item["context"].items())
        spec.context[ctx.key()] = ctx.value().get<real>();
    concepts.push_back(std::move(spec));
  }
  return make_concept_table(j.at("dim").get<int>(), j.at("seed").get<std::uint64_t>(),
                            std::move(concepts));
}

void save_concept_table(const ConceptTable& table, const std::string& path) {
  json j;
  j["dim"] = table.dim;
  j["seed"] = table.seed;
  j["concepts"] = json::array();
  for (const auto& spec : table.concepts) {
    json c;
    c["name"] = spec.name;
    c["color"] = {spec.signature.color[0], spec.signature.color[1], spec.signature.color[2]};
    c["tolerance"] = spec.signature.tolerance;
    if (!spec.context.empty()) {
      json ctx = json::object();
      for (const auto& [name, weight] : spec.context) ctx[name] = weight;
      c["context"] = ctx;
    }
    j["concepts"].push_back(c);
  }
  std::ofstream out(path);
  require(out.good(), "concept table: cannot write \"" + path + "\"");
  out << j.dump(2) << '\n';
}

ConceptTable default_concept_table(std::uint64_t seed, real context_mix) {
  std::vector<ConceptSpec> concepts(4);
  concepts[0].name = "toy-train";
  concepts[0].signature = {palette::train_body(), palette::object_tolerance()};
  concepts[0].context = {{"railroad", context_mix}};
  concepts[1].name = "toy-boat";
  concepts[1].signature = {palette::boat_hull(), palette::object_tolerance()};
  concepts[1].context = {{"river", context_mix}};
  concepts[2].name = "railroad";
  concepts[2].signature = {palette::railroad(), palette::background_tolerance()};
  concepts[3].name = "river";
  concepts[3].signature = {palette::river(), palette::background_tolerance()};
  return make_concept_table(16, seed, std::move(concepts));
}

SyntheticMatcher::SyntheticMatcher(ConceptTable table) : table_(std::move(table)) {}

Mat SyntheticMatcher::concept_density(const Image& image) const {
  const int n = table_.concept_count();
  const int pixels = image.pixel_count();
  Mat dens = Mat::Zero(n, pixels);
  for (int p = 0; p < pixels; ++p) {
    const Eigen::Vector3d rgb = image.rgb.row(p).transpose();
    const real lum = rgb.sum() / 3.0;
    if (lum <= 0) continue;
    for (int c = 0; c < n; ++c) {
      const real memb = signature_membership(table_.concepts[static_cast<std::size_t>(c)].signature, rgb);
      if (memb > 0) dens(c, p) = memb * lum;
    }
  }
  return dens;
}

Vec SyntheticMatcher::coverage(const Image& image) const {
  return concept_density(image).rowwise().sum();
}

EmbeddingVector SyntheticMatcher::encode_image(const Image& image) const {
  const Vec w = coverage(image);
  const real norm = w.norm();  // equals |vectors * w| since columns are orthonormal
  if (norm < kNullThreshold) return table_.null_vector;
  return table_.vectors * (w / norm);
}

int SyntheticMatcher::match_concept(const std::string& prompt) const {
  require(!prompt.empty(), "encode_text: empty prompt");
  int best = -1;
  std::size_t best_len = 0;
  for (int c = 0; c < table_.concept_count(); ++c) {
    const auto& name = table_.concepts[static_cast<std::size_t>(c)].name;
    if (prompt.find(name) != std::string::npos && name.size() > best_len) {
      best = c;
      best_len = name.size();
    }
  }
  if (best < 0) {
    std::string known;
    for (const auto& spec : table_.concepts) known += (known.empty() ? "" : ", ") + spec.name;
    throw ValidationError("encode_text: prompt \"" + prompt +
                          "\" mentions no known concept; known concepts: " + known);
  }
  return best;
}

Vec SyntheticMatcher::text_coefficients(const std::string& prompt) const {
  const int c = match_concept(prompt);
  Vec coeff = Vec::Zero(table_.concept_count());
  coeff[c] = 1.0;
  for (const auto& [ctx_name, weight] : table_.concepts[static_cast<std::size_t>(c)].context)
    coeff[table_.index_of(ctx_name)] += weight;
  return coeff / coeff.norm();
}

EmbeddingVector SyntheticMatcher::encode_text(const std::string& prompt) const {
  return table_.vectors * text_coefficients(prompt);
}

Mat SyntheticMatcher::encode_image_backward(const Image& image, const Vec& embedding_grad) const {
  const int n = table_.concept_count();
  const int pixels = image.pixel_count();
  Mat grad = Mat::Zero(pixels, 3);

  const Vec w = coverage(image);
  const real norm = w.norm();
  if (norm < kNullThreshold) return grad;  // null branch: constant output

  const Vec w_hat = w / norm;
  // dL/dw through v = vectors * w / |w|
  const Vec g_proj = table_.vectors.transpose() * embedding_grad;  // n
  const Vec g_w = (g_proj - w_hat * w_hat.dot(g_proj)) / norm;

  for (int p = 0; p < pixels; ++p) {
    const Eigen::Vector3d rgb = image.rgb.row(p).transpose();
    const real s = rgb.sum();
    if (s <= 0) continue;
    const Eigen::Vector3d chrom = rgb / s;
    const real lum = s / 3.0;
    for (int c = 0; c < n; ++c) {
      const auto& sig = table_.concepts[static_cast<std::size_t>(c)].signature;
      const real memb = signature_membership(sig, rgb);
      if (memb <= 0) continue;
      const Eigen::Vector3d diff = chrom - sig.color / sig.color.sum();
      // d memb / d chrom, then chain chrom = rgb / sum(rgb)
      const Eigen::Vector3d dmemb_dchrom = -memb / (sig.tolerance * sig.tolerance) * diff;
      const real dot_rgb = dmemb_dchrom.dot(rgb);
      for (int j = 0; j < 3; ++j) {
        const real dmemb_drgb = dmemb_dchrom[j] / s - dot_rgb / (s * s);
        grad(p, j) += g_w[c] * (memb / 3.0 + lum * dmemb_drgb);
      }
    }
  }
  return grad;
}

// ---------------------------------------------------------------------------
// External model adapter.
// ---------------------------------------------------------------------------

ExternalMatcherAdapter::ExternalMatcherAdapter(ExternalMatcherConfig config, int dim)
    : config_(std::move(config)), dim_(dim) {
  require(!config_.model_identifier.empty(), "external matcher: empty model identifier");
  require(config_.input_size >= 8, "external matcher: input size must be >= 8");
}

void ExternalMatcherAdapter::set_backends(ImageBackend image_backend, TextBackend text_backend) {
  image_backend_ = std::move(image_backend);
  text_backend_ = std::move(text_backend);
}

Mat ExternalMatcherAdapter::preprocess(const Image& image) const {
  const int size = config_.input_size;
  // Bilinear resize with half-pixel centers; works for shrink and grow alike.
  Mat out(static_cast<Eigen::Index>(size) * size, 3);
  const real sy = static_cast<real>(image.height) / size;
  const real sx = static_cast<real>(image.width) / size;
  for (int y = 0; y < size; ++y) {
    real fy = (y + 0.5) * sy - 0.5;
    fy = std::clamp(fy, real(0), static_cast<real>(image.height - 1));
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, image.height - 1);
    const real ty = fy - y0;
    for (int x = 0; x < size; ++x) {
      real fx = (x + 0.5) * sx - 0.5;
      fx = std::clamp(fx, real(0), static_cast<real>(image.width - 1));
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, image.width - 1);
      const real tx = fx - x0;
      const Eigen::RowVector3d v = (1 - ty) * (1 - tx) * image.rgb.row(y0 * image.width + x0) +
                                   (1 - ty) * tx * image.rgb.row(y0 * image.width + x1) +
                                   ty * (1 - tx) * image.rgb.row(y1 * image.width + x0) +
                                   ty * tx * image.rgb.row(y1 * image.width + x1);
      out.row(static_cast<Eigen::Index>(y) * size + x) = v;
    }
  }
  for (int c = 0; c < 3; ++c)
    out.col(c) = (out.col(c).array() - config_.channel_mean[c]) / config_.channel_std[c];
  return out;
}

EmbeddingVector ExternalMatcherAdapter::encode_image(const Image& image) const {
  if (!image_backend_)
    throw std::runtime_error("external matcher \"" + config_.model_identifier +
                             "\": no image backend attached");
  Vec v = image_backend_(preprocess(image));
  const real n = v.norm();
  require(n > 0, "external matcher: backend returned a zero embedding");
  return v / n;
}

EmbeddingVector ExternalMatcherAdapter::encode_text(const std::string& prompt) const {
  if (!text_backend_)
    throw std::runtime_error("external matcher \"" + config_.model_identifier +
                             "\": no text backend attached");
  Vec v = text_backend_(prompt);
  const real n = v.norm();
  require(n > 0, "external matcher: backend returned a zero embedding");
  return v / n;
}

}  // namespace clims
