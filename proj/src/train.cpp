#include "hesskit/train.hpp"

#include <cmath>

#include "hesskit/rng.hpp"

namespace hesskit {

json TrainHistory::to_json() const {
  json arr = json::array();
  for (size_t i = 0; i < epochs.size(); ++i) {
    json e;
    e["epoch"] = static_cast<int64_t>(i);
    e["loss"] = epochs[i].loss;
    e["accuracy"] = epochs[i].accuracy;
    arr.push_back(e);
  }
  json j;
  j["epochs"] = arr;
  return j;
}

double cosine_lr(int64_t t, int64_t total, double lr0) {
  if (total < 1) raise(Errc::InvalidSpec, "total epochs must be at least 1");
  const double pi = 3.14159265358979323846;
  return lr0 * 0.5 * (1.0 + std::cos(pi * static_cast<double>(t) / static_cast<double>(total)));
}

TrainHistory train_model(Model& model, const Dataset& data, const TrainConfig& config,
                         uint64_t seed, const ForwardHooks* hooks) {
  config.validate();
  if (data.train_size() == 0) raise(Errc::InvalidSpec, "dataset has no training samples");

  TrainHistory history;
  auto params = model.trainable();
  std::vector<Tensor> velocity;
  velocity.reserve(params.size());
  for (const auto& p : params) velocity.push_back(Tensor::zeros(p.shape()));

  Rng rng(mix_seed(seed, 0x7121));
  std::vector<int64_t> order(static_cast<size_t>(data.train_size()));
  for (int64_t i = 0; i < data.train_size(); ++i) order[static_cast<size_t>(i)] = i;

  for (int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, config.epochs, config.initial_lr);
    shuffle_inplace(order, rng);

    double loss_sum = 0.0;
    int64_t correct = 0;
    int64_t seen = 0;
    for (int64_t start = 0; start < data.train_size(); start += config.batch_size) {
      const int64_t stop = std::min(data.train_size(), start + config.batch_size);
      std::vector<int64_t> idx(order.begin() + start, order.begin() + stop);
      Tensor x = data.gather_train(idx);
      std::vector<int> y = data.labels_train(idx);

      Tape tape;
      Tensor logits = model.forward(tape, x, true, hooks);
      Tensor loss = ops::softmax_xent(tape, logits, y);
      const double loss_v = loss.item();
      if (!std::isfinite(loss_v))
        raise(Errc::DivergedLoss, "training loss is not finite at epoch " + std::to_string(epoch));

      const int64_t bs = stop - start;
      loss_sum += loss_v * static_cast<double>(bs);
      const int64_t classes = logits.extent(1);
      for (int64_t i = 0; i < bs; ++i) {
        const double* row = logits.data() + i * classes;
        int64_t best = 0;
        for (int64_t c = 1; c < classes; ++c)
          if (row[c] > row[best]) best = c;
        if (best == y[static_cast<size_t>(i)]) ++correct;
      }
      seen += bs;

      auto grads = backward(tape, loss, params, false);
      for (size_t p = 0; p < params.size(); ++p) {
        double* w = params[p].data();
        double* v = velocity[p].data();
        const double* g = grads[p].data();
        for (int64_t i = 0; i < params[p].numel(); ++i) {
          v[i] = config.momentum * v[i] + g[i] + config.weight_decay * w[i];
          w[i] -= lr * v[i];
        }
      }
    }
    history.epochs.push_back({loss_sum / static_cast<double>(seen),
                              static_cast<double>(correct) / static_cast<double>(seen)});
  }
  return history;
}

double test_accuracy(Model& model, const Dataset& data, int threads) {
  return evaluate_accuracy(model, data.test_x, data.test_y, data.sample_shape, threads);
}

double train_accuracy(Model& model, const Dataset& data, int threads) {
  return evaluate_accuracy(model, data.train_x, data.train_y, data.sample_shape, threads);
}

}  // namespace hesskit
