// SPDX-License-Identifier: Apache-2.0

#include "mapvae/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "mapvae/errors.hpp"

namespace mapvae::diffcore {

namespace {

constexpr char kMagic[8] = {'M', 'V', 'A', 'E', 'C', 'K', 'P', '1'};

void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

void write_str(std::ostream& out, const std::string& s) {
  write_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_str(std::istream& in) {
  const std::uint64_t n = read_u64(in);
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  return s;
}

void write_tensor(std::ostream& out, const Tensor& t) {
  write_u64(out, t.rows);
  write_u64(out, t.cols);
  out.write(reinterpret_cast<const char*>(t.v.data()),
            static_cast<std::streamsize>(t.v.size() * sizeof(double)));
}

Tensor read_tensor(std::istream& in) {
  Tensor t;
  t.rows = read_u64(in);
  t.cols = read_u64(in);
  t.v.resize(t.rows * t.cols);
  in.read(reinterpret_cast<char*>(t.v.data()),
          static_cast<std::streamsize>(t.v.size() * sizeof(double)));
  return t;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint '" + path + "'");
  out.write(kMagic, sizeof kMagic);
  write_u64(out, ck.step);
  write_str(out, ck.config_text);
  write_str(out, ck.rng_state);
  write_u64(out, static_cast<std::uint64_t>(ck.params.adam_t));
  write_u64(out, ck.params.blocks.size());
  for (const ParamBlock& b : ck.params.blocks) {
    write_str(out, b.name);
    const char t = b.trainable ? 1 : 0;
    out.write(&t, 1);
    write_tensor(out, b.value);
    write_tensor(out, b.adam_m);
    write_tensor(out, b.adam_v);
  }
  if (!out) throw DataError("write failed for checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw DataError("'" + path + "' is not a mapvae checkpoint");
  }
  Checkpoint ck;
  ck.step = read_u64(in);
  ck.config_text = read_str(in);
  ck.rng_state = read_str(in);
  ck.params.adam_t = static_cast<std::int64_t>(read_u64(in));
  const std::uint64_t nblocks = read_u64(in);
  for (std::uint64_t i = 0; i < nblocks; ++i) {
    const std::string name = read_str(in);
    char t = 0;
    in.read(&t, 1);
    ParamBlock& b = ck.params.add(name, read_tensor(in), t != 0);
    b.adam_m = read_tensor(in);
    b.adam_v = read_tensor(in);
  }
  if (!in) throw DataError("truncated checkpoint '" + path + "'");
  return ck;
}

}  // namespace mapvae::diffcore
