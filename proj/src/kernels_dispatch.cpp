// SPDX-License-Identifier: Apache-2.0

#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "mapvae/kernels.hpp"

namespace mapvae::kernels {
namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Backend pick_default() {
  if (const char* env = std::getenv("MAPVAE_BACKEND")) {
    const std::string s(env);
    if (s == "scalar") return Backend::scalar;
    if (s == "avx2" && avx2_supported()) return Backend::avx2;
  }
  return avx2_supported() ? Backend::avx2 : Backend::scalar;
}

std::atomic<const Ops*> g_ops{nullptr};
std::atomic<Backend> g_backend{Backend::scalar};

void init_once() {
  if (g_ops.load(std::memory_order_acquire) != nullptr) return;
  const Backend b = pick_default();
  g_backend.store(b, std::memory_order_relaxed);
  g_ops.store(b == Backend::avx2 ? &detail::avx2_ops : &detail::scalar_ops,
              std::memory_order_release);
}

}  // namespace

bool avx2_supported() { return detail::avx2_compiled() && cpu_has_avx2(); }

const Ops& ops() {
  init_once();
  return *g_ops.load(std::memory_order_acquire);
}

Backend active_backend() {
  init_once();
  return g_backend.load(std::memory_order_relaxed);
}

const char* backend_name(Backend b) {
  return b == Backend::avx2 ? "avx2" : "scalar";
}

void set_backend(Backend b) {
  if (b == Backend::avx2 && !avx2_supported()) {
    throw std::runtime_error("avx2 backend requested but not supported on this CPU");
  }
  g_backend.store(b, std::memory_order_relaxed);
  g_ops.store(b == Backend::avx2 ? &detail::avx2_ops : &detail::scalar_ops,
              std::memory_order_release);
}

}  // namespace mapvae::kernels
