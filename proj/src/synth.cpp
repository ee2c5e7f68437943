#include <cmath>

#include "clinfuse/dataset.hpp"
#include "clinfuse/error.hpp"
#include "clinfuse/rng.hpp"

namespace clinfuse {

void SynthSpec::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("synth spec: " + msg); };
  if (patients < 2) fail("patients must be >= 2");
  if (slices_per_patient < 1) fail("slices_per_patient must be >= 1");
  if (clinical_dim < 1 + clinical_only_attributes) fail("clinical_dim must leave room for the planted attributes");
  if (clinical_only_attributes < 0) fail("clinical_only_attributes must be >= 0");
  if (image_size < 4) fail("image_size must be >= 4");
  if (image_signal < 0 || clinical_signal < 0 || correlated_signal < 0) fail("signal strengths must be >= 0");
  if (!(noise > 0)) fail("noise must be > 0");
  if (healthy_coupling < -1 || healthy_coupling > 1) fail("healthy_coupling must lie in [-1,1]");
}

namespace {

double gaussian(double dy, double dx, double sigma) { return std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma)); }

}  // namespace

Eigen::MatrixXd image_only_pattern(int size) {
  Eigen::MatrixXd m(size, size);
  const double c = (size - 1) / 2.0, sigma = size / 4.0;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) m(y, x) = ((x + y) % 2 == 0 ? 1.0 : -1.0) * gaussian(y - c, x - c, sigma);
  }
  return m;
}

Eigen::MatrixXd correlated_pattern(int size) {
  Eigen::MatrixXd m(size, size);
  const double c = (size - 1) / 2.0, sigma = size / 3.0;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) m(y, x) = gaussian(y - c, x - c, sigma);
  }
  return m;
}

Dataset synth_generate(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const Eigen::MatrixXd p_img = image_only_pattern(spec.image_size);
  const Eigen::MatrixXd p_corr = correlated_pattern(spec.image_size);
  const int s = spec.image_size;
  const double coupling_rest = std::sqrt(1.0 - spec.healthy_coupling * spec.healthy_coupling);

  Dataset ds;
  ds.clinical_dim = spec.clinical_dim;
  ds.image_size = s;
  const int width = std::max(4, static_cast<int>(std::to_string(spec.patients - 1).size()));
  for (int i = 0; i < spec.patients; ++i) {
    PatientRecord rec;
    std::string digits = std::to_string(i);
    if (digits.size() < static_cast<std::size_t>(width)) digits.insert(0, width - digits.size(), '0');
    rec.patient_id = "P" + digits;
    rec.label = rng.bernoulli(0.5) ? 1 : 0;
    const double y = rec.label;
    const double z = rng.normal();
    const double w = rng.normal();
    const double u = rec.label == 1 ? z : spec.healthy_coupling * z + coupling_rest * w;

    rec.clinical.resize(spec.clinical_dim);
    for (int j = 0; j < spec.clinical_dim; ++j) rec.clinical(j) = spec.noise * rng.normal();
    rec.clinical(0) += z;
    for (int j = 1; j <= spec.clinical_only_attributes; ++j) {
      const double sign = (j % 2 == 1) ? 1.0 : -1.0;
      rec.clinical(j) += sign * spec.clinical_signal * (2.0 * y - 1.0);
    }

    const Eigen::MatrixXd clean = y * spec.image_signal * p_img + spec.correlated_signal * u * p_corr;
    for (int sl = 0; sl < spec.slices_per_patient; ++sl) {
      Eigen::VectorXd v(s * s);
      for (int r = 0; r < s; ++r) {
        for (int c = 0; c < s; ++c) v(r * s + c) = clean(r, c) + spec.noise * rng.normal();
      }
      rec.images.emplace_back(Shape{1, s, s}, std::move(v));
    }
    ds.patients.push_back(std::move(rec));
  }
  return ds;
}

}  // namespace clinfuse
