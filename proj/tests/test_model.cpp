#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "powercap/model.hpp"

using namespace powercap;

namespace {
const ModelParams kRef = ModelParams::reference();
}

TEST(Model, ReferenceParameters) {
  EXPECT_DOUBLE_EQ(kRef.a, 0.95);
  EXPECT_DOUBLE_EQ(kRef.b, 0.15);
  EXPECT_DOUBLE_EQ(kRef.alpha, 0.041);
  EXPECT_DOUBLE_EQ(kRef.beta, 24.3);
  EXPECT_DOUBLE_EQ(kRef.k_l, 47.9);
  EXPECT_DOUBLE_EQ(kRef.tau, 1.0 / 3.0);
  EXPECT_NO_THROW(kRef.validate());
}

TEST(Model, ValidateRejectsBadParameters) {
  auto p = kRef;
  p.beta = p.b;
  EXPECT_THROW(p.validate(), InputError);
  p = kRef;
  p.alpha = 0.0;
  EXPECT_THROW(p.validate(), InputError);
  p = kRef;
  p.tau = -1.0;
  EXPECT_THROW(p.validate(), InputError);
}

TEST(Model, StaticProgressExamples) {
  EXPECT_NEAR(static_progress(kRef, 1e6), 47.9, 1e-12);
  EXPECT_NEAR(kRef.knee_pcap(), 25.421052631578952, 1e-12);
  EXPECT_NEAR(static_progress(kRef, kRef.knee_pcap()), 0.0, 1e-12);
  // direct evaluation oracle (Python, independent of this code)
  EXPECT_NEAR(static_progress(kRef, 100.0), 45.27713953062391, 1e-9);
  // clamped below the knee
  EXPECT_EQ(static_progress(kRef, 10.0), 0.0);
}

TEST(Model, PowerExpressions) {
  EXPECT_NEAR(measured_power_surrogate(kRef, kRef.knee_pcap()), 1.0, 1e-12);
  EXPECT_NEAR(measured_power_surrogate(kRef, 100.0), 0.05475700353603516, 1e-12);
  EXPECT_GT(measured_power_surrogate(kRef, 50.0), measured_power_surrogate(kRef, 60.0));

  ModelParams identity = kRef;
  identity.a = 1.0;
  identity.b = 0.0;
  EXPECT_DOUBLE_EQ(physical_power(identity, 50.0), 50.0);
  EXPECT_NEAR(physical_power(kRef, 100.0), 95.15, 1e-12);
  EXPECT_NEAR(physical_power(kRef, 40.0), 38.15, 1e-12);
}

TEST(Model, LinearizingTransform) {
  EXPECT_NEAR(linearize_pcap(kRef, kRef.knee_pcap()), 0.0, 1e-12);
  EXPECT_NEAR(linearize_pcap(kRef, 100.0), 0.9452429964639648, 1e-12);
  EXPECT_NEAR(delinearize_pcap(kRef, 0.9452), 99.97984813936246, 1e-9);

  ModelParams wide = kRef;
  wide.pcap_min = 0.0;
  EXPECT_NEAR(delinearize_pcap(wide, 0.0), kRef.knee_pcap(), 1e-12);
  EXPECT_THROW(delinearize_pcap(kRef, 1.0), DomainError);
  EXPECT_THROW(delinearize_pcap(kRef, 1.5), DomainError);
  // clamped to the actuator range
  EXPECT_DOUBLE_EQ(delinearize_pcap(kRef, 0.0), kRef.pcap_min);
  EXPECT_DOUBLE_EQ(delinearize_pcap(kRef, 0.999999), kRef.pcap_max);
}

TEST(Model, LinearStepCoefficients) {
  const auto c = linear_coefficients(kRef, 1.0);
  EXPECT_NEAR(c.input_gain, 0.75 * kRef.k_l, 1e-12);
  EXPECT_NEAR(c.state_decay, 0.25, 1e-12);
  EXPECT_THROW(linear_coefficients(kRef, 0.0), InputError);

  const double u = linearize_pcap(kRef, 80.0);
  const double fixed = kRef.k_l * u;
  EXPECT_NEAR(linear_step(kRef, fixed, u, 1.0), fixed, 1e-12);
  double p = 0.0;
  for (int i = 0; i < 60; ++i) p = linear_step(kRef, p, u, 1.0);
  EXPECT_NEAR(p, fixed, 1e-12);
}

TEST(ModelProperty, Invariants) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> pc(kRef.pcap_min, kRef.pcap_max);
  std::uniform_real_distribution<double> dtd(0.05, 5.0);
  for (int trial = 0; trial < 2000; ++trial) {
    const double p1 = pc(rng), p2 = pc(rng);
    const double lo = std::min(p1, p2), hi = std::max(p1, p2);
    if (lo < hi) {
      EXPECT_LT(static_progress(kRef, lo), static_progress(kRef, hi));
    }
    EXPECT_GE(static_progress(kRef, p1), 0.0);
    EXPECT_LT(static_progress(kRef, p1), kRef.k_l);

    const auto c = linear_coefficients(kRef, dtd(rng));
    EXPECT_NEAR(c.input_gain / kRef.k_l + c.state_decay, 1.0, 1e-12);

    EXPECT_NEAR(delinearize_pcap(kRef, linearize_pcap(kRef, p1)), p1, 1e-9);
    EXPECT_NEAR(measured_power_surrogate(kRef, p1), 1.0 - static_progress(kRef, p1) / kRef.k_l, 1e-12);
  }
}

TEST(ModelProperty, DynamicsConvergeToStatics) {
  // Contraction factor per step is tau/(dt+tau); enough steps to shrink a k_l-sized
  // initial error below 1e-6.
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> pc(kRef.pcap_min, kRef.pcap_max);
  const double dt = 1.0;
  const double decay = kRef.tau / (dt + kRef.tau);
  const int steps = static_cast<int>(std::ceil(std::log(1e-6 / kRef.k_l) / std::log(decay)));
  for (int trial = 0; trial < 100; ++trial) {
    const double pcap = pc(rng);
    const double u = linearize_pcap(kRef, pcap);
    double p = 0.0;
    for (int i = 0; i < steps; ++i) p = linear_step(kRef, p, u, dt);
    EXPECT_NEAR(p, static_progress(kRef, pcap), 1e-6);
  }
}

TEST(Model, JsonRoundTrip) {
  nlohmann::json j = kRef;
  EXPECT_EQ(j.at("k_l").get<double>(), 47.9);
  EXPECT_EQ(j.get<ModelParams>(), kRef);
}
