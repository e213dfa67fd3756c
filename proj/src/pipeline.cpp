#include "clims/pipeline.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "clims/parallel.hpp"

namespace clims {

namespace fs = std::filesystem;
using nlohmann::json;

TrainState init_train_state(const TrainConfig& config, int class_count) {
  TrainState state;
  state.params = init_backbone(class_count, config.seed);
  state.velocity = zeros_like(state.params);
  state.rng = Rng(splitmix64(config.seed ^ 0x747261696eULL));
  state.config_hash = config_hash(config);
  return state;
}

real lr_at(std::int64_t step, std::int64_t total_steps, real lr0) {
  require(total_steps >= 1, "lr_at: total_steps must be >= 1");
  require(step >= 0 && step <= total_steps, "lr_at: step outside [0, total_steps]");
  return lr0 * 0.5 * (1.0 + std::cos(M_PI * static_cast<real>(step) / static_cast<real>(total_steps)));
}

namespace {

struct PerImageWork {
  ForwardCache cache;
  FeatureMap features;
  ActivationMaps feature_probs;
  ActivationMaps image_maps;
  real cls_loss = 0;
  Vec cls_logit_grad;
};

void sgd_update(Mat& param, Mat& velocity, const Mat& grad, real lr, real weight_decay) {
  velocity = kSgdMomentum * velocity + grad;
  param -= lr * velocity + lr * weight_decay * param;
}

void sgd_update(Vec& param, Vec& velocity, const Vec& grad, real lr, real weight_decay) {
  velocity = kSgdMomentum * velocity + grad;
  param -= lr * velocity + lr * weight_decay * param;
}

std::string describe_batch(const std::vector<int>* batch_indices, std::size_t batch) {
  std::ostringstream os;
  if (batch_indices) {
    os << "indices [";
    for (std::size_t i = 0; i < batch_indices->size(); ++i)
      os << (i ? "," : "") << (*batch_indices)[i];
    os << "]";
  } else {
    os << batch << " images";
  }
  return os.str();
}

}  // namespace

StepResult train_step(TrainState& state, const std::vector<Image>& images,
                      const std::vector<LabelVector>& labels, const PromptBook& book,
                      const SyntheticMatcher& matcher, const TrainConfig& config,
                      const TrainObjective& objective, std::int64_t total_steps,
                      const std::vector<int>* batch_indices) {
  const int batch = static_cast<int>(images.size());
  require(batch > 0, "train_step: empty batch");
  require(labels.size() == images.size(), "train_step: image/label count mismatch");
  require(state.params.initialized(), "train_step: uninitialized state");

  const real lr = lr_at(std::min(state.step, total_steps), total_steps, config.learning_rate);
  const real inv_batch = 1.0 / static_cast<real>(batch);
  const int class_count = state.params.class_count();

  std::vector<PerImageWork> work(static_cast<std::size_t>(batch));
  parallel_for(batch, [&](int i) {
    PerImageWork& w = work[static_cast<std::size_t>(i)];
    const Image& image = images[static_cast<std::size_t>(i)];
    w.features = forward_features(state.params, image, &w.cache);
    w.feature_probs = activation_head(w.features, state.params.head);
    if (objective.kind == TrainObjective::Kind::text_matching)
      w.image_maps = upsample_maps(w.feature_probs, image.height, image.width);
  });

  StepResult result;
  result.learning_rate = lr;
  std::vector<Mat> map_grads;
  std::vector<Mat> logit_grads(static_cast<std::size_t>(batch));

  if (objective.kind == TrainObjective::Kind::text_matching) {
    std::vector<ActivationMaps> maps;
    maps.reserve(static_cast<std::size_t>(batch));
    for (const auto& w : work) maps.push_back(w.image_maps);
    const BatchLossResult loss =
        clims_batch_loss(images, labels, maps, book, matcher, objective.weights,
                         config.similarity_clamp_epsilon, &map_grads);
    result.breakdown = loss.breakdown;
    parallel_for(batch, [&](int i) {
      logit_grads[static_cast<std::size_t>(i)] = map_grad_to_logit_grad(
          map_grads[static_cast<std::size_t>(i)], work[static_cast<std::size_t>(i)].feature_probs,
          images[static_cast<std::size_t>(i)].height, images[static_cast<std::size_t>(i)].width);
    });
  } else {
    // classifier baseline: BCE on GAP logits
    result.breakdown.area = Vec::Zero(class_count);
    parallel_for(batch, [&](int i) {
      PerImageWork& w = work[static_cast<std::size_t>(i)];
      const ClassLogits logits = baseline_logits(w.features, state.params.head);
      w.cls_loss = baseline_bce_loss(logits, labels[static_cast<std::size_t>(i)]);
      w.cls_logit_grad = baseline_bce_grad(logits, labels[static_cast<std::size_t>(i)]) * inv_batch;
    });
    for (const auto& w : work) {
      result.breakdown.total += w.cls_loss * inv_batch;
      result.breakdown.area += w.feature_probs.values.rowwise().mean() * inv_batch;
    }
  }

  if (!std::isfinite(result.breakdown.total)) {
    std::ostringstream os;
    os << "train_step: non-finite loss at step " << state.step << " (lr " << lr << ", batch "
       << describe_batch(batch_indices, images.size()) << "; otm " << result.breakdown.otm
       << ", btm " << result.breakdown.btm << ", cbs " << result.breakdown.cbs << ", reg "
       << result.breakdown.reg << ")";
    throw std::runtime_error(os.str());
  }

  // accumulate parameter gradients per image, reduced in index order
  std::vector<BackboneTensors> grads(static_cast<std::size_t>(batch));
  parallel_for(batch, [&](int i) {
    PerImageWork& w = work[static_cast<std::size_t>(i)];
    BackboneTensors& g = grads[static_cast<std::size_t>(i)];
    g = zeros_like(state.params);
    Mat feature_grad;
    if (objective.kind == TrainObjective::Kind::text_matching) {
      feature_grad = head_backward(w.features, state.params.head,
                                   logit_grads[static_cast<std::size_t>(i)], g.head);
    } else {
      const Vec pooled = w.features.values.rowwise().mean();
      g.head.noalias() += pooled * w.cls_logit_grad.transpose();
      const Vec dz = state.params.head * w.cls_logit_grad /
                     static_cast<real>(w.features.pixel_count());
      feature_grad = dz.replicate(1, w.features.pixel_count());
    }
    backward_features(state.params, w.cache, feature_grad, g);
  });
  BackboneTensors total = zeros_like(state.params);
  for (const auto& g : grads) {
    for (std::size_t li = 0; li < total.conv_weight.size(); ++li) {
      total.conv_weight[li] += g.conv_weight[li];
      total.conv_bias[li] += g.conv_bias[li];
    }
    total.head += g.head;
  }

  for (std::size_t li = 0; li < state.params.convs.size(); ++li) {
    sgd_update(state.params.convs[li].weight, state.velocity.conv_weight[li], total.conv_weight[li],
               lr, config.weight_decay);
    sgd_update(state.params.convs[li].bias, state.velocity.conv_bias[li], total.conv_bias[li], lr,
               config.weight_decay);
  }
  sgd_update(state.params.head, state.velocity.head, total.head, lr, config.weight_decay);

  state.step += 1;
  return result;
}

namespace {

Image crop_image(const Image& img, int y0, int x0, int size) {
  Image out = make_image<real>(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      out.rgb.row(y * size + x) = img.rgb.row((y0 + y) * img.width + (x0 + x));
  return out;
}

}  // namespace

TrainResult train(const TrainConfig& config, const SceneDataset& data, const PromptBook& book,
                  const SyntheticMatcher& matcher, const std::string& out_dir,
                  const TrainObjective& objective, const std::optional<TrainState>& resume) {
  require(data.size() > 0, "train: dataset is empty");
  require(book.class_count() == data.class_count(), "train: dataset/prompt-book class mismatch");
  for (int k = 0; k < book.class_count(); ++k)
    require(book.class_names[static_cast<std::size_t>(k)] == data.class_names[static_cast<std::size_t>(k)],
            "train: dataset/prompt-book class mismatch at index " + std::to_string(k));
  require(config.crop_size <= data.height && config.crop_size <= data.width,
          "train: crop_size exceeds dataset image size");
  if (objective.kind == TrainObjective::Kind::text_matching) {
    // every labeled class must be resolvable by the matcher before training
    for (const auto& prompt : book.object_prompts) matcher.text_coefficients(prompt);
  }

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("train: cannot create \"" + out_dir + "\": " + ec.message());

  TrainState state = resume ? *resume : init_train_state(config, data.class_count());
  require(state.params.class_count() == data.class_count(), "train: resumed class count mismatch");

  const int steps_per_epoch = (data.size() + config.batch_size - 1) / config.batch_size;
  const std::int64_t total_steps = static_cast<std::int64_t>(steps_per_epoch) * config.epochs;

  TrainResult result;
  const auto checkpoint_path = [&](int epoch) {
    char name[40];
    std::snprintf(name, sizeof name, "checkpoint_epoch_%03d.bin", epoch);
    return (fs::path(out_dir) / name).string();
  };

  if (!resume) {
    const std::string initial = checkpoint_path(0);
    save_checkpoint(state, initial);
    result.checkpoints.push_back(initial);
  }

  std::ofstream log(fs::path(out_dir) / "loss_log.jsonl", resume ? std::ios::app : std::ios::out);
  if (!log.good()) throw std::runtime_error("train: cannot write loss log in \"" + out_dir + "\"");
  log.precision(12);

  std::vector<int> order(static_cast<std::size_t>(data.size()));
  for (int i = 0; i < data.size(); ++i) order[static_cast<std::size_t>(i)] = i;

  for (int epoch = state.epoch; epoch < config.epochs; ++epoch) {
    state.rng.shuffle(order);
    real epoch_total = 0;
    int epoch_steps = 0;
    for (int start = 0; start < data.size(); start += config.batch_size) {
      const int count = std::min(config.batch_size, data.size() - start);
      std::vector<int> batch_indices(order.begin() + start, order.begin() + start + count);
      std::vector<Image> images;
      std::vector<LabelVector> labels;
      images.reserve(static_cast<std::size_t>(count));
      labels.reserve(static_cast<std::size_t>(count));
      for (int idx : batch_indices) {
        const Image& src = data.images[static_cast<std::size_t>(idx)];
        const int y0 = static_cast<int>(state.rng.uniform_int(0, src.height - config.crop_size));
        const int x0 = static_cast<int>(state.rng.uniform_int(0, src.width - config.crop_size));
        Image img = crop_image(src, y0, x0, config.crop_size);
        if (state.rng.bernoulli(0.5)) img = flip_horizontal(img);
        images.push_back(std::move(img));
        labels.push_back(data.labels[static_cast<std::size_t>(idx)]);
      }
      const StepResult step = train_step(state, images, labels, book, matcher, config, objective,
                                         total_steps, &batch_indices);
      epoch_total += step.breakdown.total;
      epoch_steps += 1;

      json row;
      row["step"] = state.step - 1;
      row["epoch"] = epoch;
      row["lr"] = step.learning_rate;
      row["otm"] = step.breakdown.otm;
      row["btm"] = step.breakdown.btm;
      row["cbs"] = step.breakdown.cbs;
      row["reg"] = step.breakdown.reg;
      row["total"] = step.breakdown.total;
      row["mean_area"] = step.breakdown.area.size() ? step.breakdown.area.mean() : 0.0;
      log << row.dump() << '\n';
    }
    state.epoch = epoch + 1;
    const std::string path = checkpoint_path(state.epoch);
    save_checkpoint(state, path);
    result.checkpoints.push_back(path);
    result.epoch_mean_total.push_back(epoch_steps ? epoch_total / epoch_steps : 0.0);
  }

  result.final_checkpoint =
      result.checkpoints.empty() ? checkpoint_path(state.epoch) : result.checkpoints.back();
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints: 8-byte magic, u32 little-endian header length, JSON header
// (architecture, shapes, counters, rng), then raw little-endian doubles.
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'C', 'L', 'I', 'M', 'S', 'C', 'K', '1'};
constexpr int kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  const Mat* mat = nullptr;
  const Vec* vec = nullptr;
};

std::vector<NamedTensor> tensor_list(const BackboneParams& params, const BackboneTensors& velocity) {
  std::vector<NamedTensor> out;
  for (std::size_t li = 0; li < params.convs.size(); ++li) {
    const std::string base = "conv" + std::to_string(li);
    out.push_back({base + ".weight", &params.convs[li].weight, nullptr});
    out.push_back({base + ".bias", nullptr, &params.convs[li].bias});
    out.push_back({"velocity." + base + ".weight", &velocity.conv_weight[li], nullptr});
    out.push_back({"velocity." + base + ".bias", nullptr, &velocity.conv_bias[li]});
  }
  out.push_back({"head", &params.head, nullptr});
  out.push_back({"velocity.head", &velocity.head, nullptr});
  return out;
}

}  // namespace

void save_checkpoint(const TrainState& state, const std::string& path) {
  require(state.params.initialized(), "save_checkpoint: uninitialized state");
  json header;
  header["version"] = kCheckpointVersion;
  header["arch"] = "tinycnn4";
  header["class_count"] = state.params.class_count();
  header["epoch"] = state.epoch;
  header["step"] = state.step;
  header["rng"] = state.rng.serialize();
  char hash_hex[24];
  std::snprintf(hash_hex, sizeof hash_hex, "%016llx", static_cast<unsigned long long>(state.config_hash));
  header["config_hash"] = hash_hex;
  header["layers"] = json::array();
  for (const auto& layer : state.params.convs)
    header["layers"].push_back(
        {{"in", layer.in_channels}, {"out", layer.out_channels}, {"stride", layer.stride}});
  header["tensors"] = json::array();

  const auto tensors = tensor_list(state.params, state.velocity);
  std::size_t offset = 0;
  for (const auto& t : tensors) {
    const Eigen::Index rows = t.mat ? t.mat->rows() : t.vec->size();
    const Eigen::Index cols = t.mat ? t.mat->cols() : 1;
    header["tensors"].push_back(
        {{"name", t.name}, {"rows", rows}, {"cols", cols}, {"offset", offset}});
    offset += static_cast<std::size_t>(rows * cols) * sizeof(real);
  }

  const std::string header_text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out.good()) throw std::runtime_error("save_checkpoint: cannot write \"" + path + "\"");
  out.write(kMagic, sizeof kMagic);
  const std::uint32_t len = static_cast<std::uint32_t>(header_text.size());
  char len_bytes[4] = {static_cast<char>(len & 0xff), static_cast<char>((len >> 8) & 0xff),
                       static_cast<char>((len >> 16) & 0xff), static_cast<char>((len >> 24) & 0xff)};
  out.write(len_bytes, 4);
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  for (const auto& t : tensors) {
    const real* data = t.mat ? t.mat->data() : t.vec->data();
    const std::size_t count = t.mat ? static_cast<std::size_t>(t.mat->size())
                                    : static_cast<std::size_t>(t.vec->size());
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(real)));
  }
  if (!out.good()) throw std::runtime_error("save_checkpoint: write failed for \"" + path + "\"");
}

CheckpointLoadResult load_checkpoint(const std::string& path,
                                     std::optional<std::uint64_t> expected_config_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw std::runtime_error("load_checkpoint: cannot open \"" + path + "\"");
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in.good() || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw std::runtime_error("load_checkpoint: \"" + path + "\" is not a checkpoint (bad magic)");
  char len_bytes[4];
  in.read(len_bytes, 4);
  if (!in.good()) throw std::runtime_error("load_checkpoint: truncated header in \"" + path + "\"");
  const std::uint32_t len = static_cast<std::uint8_t>(len_bytes[0]) |
                            (static_cast<std::uint8_t>(len_bytes[1]) << 8) |
                            (static_cast<std::uint8_t>(len_bytes[2]) << 16) |
                            (static_cast<std::uint8_t>(len_bytes[3]) << 24);
  std::string header_text(len, '\0');
  in.read(header_text.data(), len);
  if (!in.good()) throw std::runtime_error("load_checkpoint: truncated header in \"" + path + "\"");

  json header;
  try {
    header = json::parse(header_text);
  } catch (const json::parse_error&) {
    throw std::runtime_error("load_checkpoint: corrupt header in \"" + path + "\"");
  }
  if (header.at("version").get<int>() != kCheckpointVersion)
    throw std::runtime_error("load_checkpoint: unsupported version " +
                             std::to_string(header["version"].get<int>()) + " in \"" + path + "\"");
  if (header.at("arch").get<std::string>() != "tinycnn4")
    throw std::runtime_error("load_checkpoint: unknown architecture tag in \"" + path + "\"");

  CheckpointLoadResult result;
  TrainState& state = result.state;
  state.epoch = header.at("epoch").get<int>();
  state.step = header.at("step").get<std::int64_t>();
  state.rng = Rng::deserialize(header.at("rng").get<std::string>());
  state.config_hash = std::stoull(header.at("config_hash").get<std::string>(), nullptr, 16);

  const int class_count = header.at("class_count").get<int>();
  for (const auto& lj : header.at("layers")) {
    Conv2dLayer layer;
    layer.in_channels = lj.at("in").get<int>();
    layer.out_channels = lj.at("out").get<int>();
    layer.stride = lj.at("stride").get<int>();
    state.params.convs.push_back(std::move(layer));
  }
  state.params.head.resize(state.params.convs.back().out_channels, class_count);
  state.velocity = BackboneTensors{};

  const auto read_block = [&](Mat& m, Eigen::Index rows, Eigen::Index cols) {
    m.resize(rows, cols);
    in.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(static_cast<std::size_t>(rows * cols) * sizeof(real)));
    if (!in.good()) throw std::runtime_error("load_checkpoint: truncated tensor data in \"" + path + "\"");
  };

  for (const auto& tj : header.at("tensors")) {
    const std::string name = tj.at("name").get<std::string>();
    const Eigen::Index rows = tj.at("rows").get<Eigen::Index>();
    const Eigen::Index cols = tj.at("cols").get<Eigen::Index>();
    Mat block;
    read_block(block, rows, cols);
    const bool is_velocity = name.rfind("velocity.", 0) == 0;
    const std::string base = is_velocity ? name.substr(9) : name;
    if (base == "head") {
      if (is_velocity)
        state.velocity.head = block;
      else
        state.params.head = block;
    } else if (base.rfind("conv", 0) == 0) {
      const std::size_t dot = base.find('.');
      const std::size_t li = static_cast<std::size_t>(std::stoi(base.substr(4, dot - 4)));
      const std::string field = base.substr(dot + 1);
      if (li >= state.params.convs.size())
        throw std::runtime_error("load_checkpoint: tensor for unknown layer in \"" + path + "\"");
      if (is_velocity) {
        state.velocity.conv_weight.resize(state.params.convs.size());
        state.velocity.conv_bias.resize(state.params.convs.size());
        if (field == "weight")
          state.velocity.conv_weight[li] = block;
        else
          state.velocity.conv_bias[li] = block.col(0);
      } else {
        if (field == "weight")
          state.params.convs[li].weight = block;
        else
          state.params.convs[li].bias = block.col(0);
      }
    } else {
      throw std::runtime_error("load_checkpoint: unknown tensor \"" + name + "\" in \"" + path + "\"");
    }
  }

  if (expected_config_hash && *expected_config_hash != state.config_hash)
    result.warning = "config hash mismatch: checkpoint was written under a different configuration";
  return result;
}

std::uint64_t params_checksum(const BackboneParams& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto mix = [&h](const real* data, std::size_t count) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < count * sizeof(real); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& layer : params.convs) {
    mix(layer.weight.data(), static_cast<std::size_t>(layer.weight.size()));
    mix(layer.bias.data(), static_cast<std::size_t>(layer.bias.size()));
  }
  mix(params.head.data(), static_cast<std::size_t>(params.head.size()));
  return h;
}

}  // namespace clims
