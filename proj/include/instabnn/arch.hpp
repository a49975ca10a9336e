// Declarative layer-by-layer network description, shared by the model
// builder and the cost model. Serialized as structured text:
//
//   # instabnn arch v1
//   name resnet20_bireal_cifar
//   input 3 32 32
//   classes 10
//   trainable 1
//   layer conv_real out=16 k=3 s=1 p=1 bn=1
//   layer binunit out=16 k=3 s=1
//   layer gap
//   layer fc
//
// binunit is one residual unit: sign-family activation, binary 3x3 (or 1x1)
// conv, BN, shortcut add, PReLU-family activation.
#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "instabnn/tensor.hpp"

namespace instabnn {

enum class ShortcutKind {
  kAuto,     // identity when shapes match, otherwise option B
  kIdentity,
  kOptionB,  // avg-pool + real 1x1 conv + BN
  kPool,     // avg-pool only (parameter-free spatial downsample)
  kDup,      // channel duplication (parameter-free channel growth)
  kNone,
};

inline std::string to_string(ShortcutKind k) {
  switch (k) {
    case ShortcutKind::kAuto: return "auto";
    case ShortcutKind::kIdentity: return "identity";
    case ShortcutKind::kOptionB: return "option_b";
    case ShortcutKind::kPool: return "pool";
    case ShortcutKind::kDup: return "dup";
    case ShortcutKind::kNone: return "none";
  }
  return "?";
}

inline ShortcutKind shortcut_from_string(const std::string& s) {
  if (s == "auto") return ShortcutKind::kAuto;
  if (s == "identity") return ShortcutKind::kIdentity;
  if (s == "option_b") return ShortcutKind::kOptionB;
  if (s == "pool") return ShortcutKind::kPool;
  if (s == "dup") return ShortcutKind::kDup;
  if (s == "none") return ShortcutKind::kNone;
  throw std::invalid_argument("unknown shortcut kind: " + s);
}

struct ArchLayer {
  std::string kind;  // conv_real | maxpool | binunit | gap | fc
  int out = 0;
  int k = 3;
  int stride = 1;
  int pad = -1;  // -1: (k - 1) / 2
  bool bn = true;
  ShortcutKind shortcut = ShortcutKind::kAuto;

  int padding() const { return pad >= 0 ? pad : (k - 1) / 2; }
};

struct ArchSpec {
  std::string name;
  int in_channels = 3, in_h = 32, in_w = 32;
  int num_classes = 10;
  bool trainable = true;
  std::vector<ArchLayer> layers;

  void validate() const {
    detail::check(!layers.empty(), "arch: no layers");
    detail::check(in_channels >= 1 && in_h >= 1 && in_w >= 1 && num_classes >= 1,
                  "arch: bad input geometry");
    for (const ArchLayer& l : layers) {
      if (l.kind == "conv_real" || l.kind == "binunit")
        detail::check(l.out >= 1 && l.k >= 1 && l.stride >= 1,
                      "arch: bad layer geometry in " + l.kind);
      else
        detail::check(l.kind == "maxpool" || l.kind == "gap" || l.kind == "fc",
                      "arch: unknown layer kind " + l.kind);
    }
  }
};

namespace archdetail {

inline std::map<std::string, std::string> parse_kv(std::istringstream& is) {
  std::map<std::string, std::string> kv;
  std::string tok;
  while (is >> tok) {
    const auto eq = tok.find('=');
    detail::check(eq != std::string::npos, "arch: expected key=value, got " + tok);
    kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return kv;
}

}  // namespace archdetail

inline ArchSpec parse_archspec(std::istream& in) {
  ArchSpec spec;
  std::string line;
  bool saw_name = false;
  while (std::getline(in, line)) {
    const auto h = line.find('#');
    if (h != std::string::npos) line = line.substr(0, h);
    std::istringstream is(line);
    std::string head;
    if (!(is >> head)) continue;
    if (head == "name") {
      is >> spec.name;
      saw_name = true;
    } else if (head == "input") {
      detail::check(static_cast<bool>(is >> spec.in_channels >> spec.in_h >> spec.in_w),
                    "arch: input wants C H W");
    } else if (head == "classes") {
      detail::check(static_cast<bool>(is >> spec.num_classes), "arch: classes wants a count");
    } else if (head == "trainable") {
      int v = 1;
      is >> v;
      spec.trainable = v != 0;
    } else if (head == "layer") {
      ArchLayer l;
      detail::check(static_cast<bool>(is >> l.kind), "arch: layer wants a kind");
      for (const auto& [k, v] : archdetail::parse_kv(is)) {
        if (k == "out") l.out = std::stoi(v);
        else if (k == "k") l.k = std::stoi(v);
        else if (k == "s") l.stride = std::stoi(v);
        else if (k == "p") l.pad = std::stoi(v);
        else if (k == "bn") l.bn = std::stoi(v) != 0;
        else if (k == "shortcut") l.shortcut = shortcut_from_string(v);
        else throw std::invalid_argument("arch: unknown layer key " + k);
      }
      spec.layers.push_back(l);
    } else {
      throw std::invalid_argument("arch: unknown directive " + head);
    }
  }
  detail::check(saw_name, "arch: missing name");
  spec.validate();
  return spec;
}

inline ArchSpec parse_archspec_file(const std::string& path) {
  std::ifstream in(path);
  detail::check(static_cast<bool>(in), "arch: cannot open " + path);
  return parse_archspec(in);
}

inline std::string archspec_to_text(const ArchSpec& spec) {
  std::ostringstream os;
  os << "# instabnn arch v1\n";
  os << "name " << spec.name << "\n";
  os << "input " << spec.in_channels << " " << spec.in_h << " " << spec.in_w << "\n";
  os << "classes " << spec.num_classes << "\n";
  os << "trainable " << (spec.trainable ? 1 : 0) << "\n";
  for (const ArchLayer& l : spec.layers) {
    os << "layer " << l.kind;
    if (l.kind == "conv_real")
      os << " out=" << l.out << " k=" << l.k << " s=" << l.stride
         << " p=" << l.padding() << " bn=" << (l.bn ? 1 : 0);
    else if (l.kind == "binunit") {
      os << " out=" << l.out << " k=" << l.k << " s=" << l.stride
         << " p=" << l.padding();
      if (l.shortcut != ShortcutKind::kAuto)
        os << " shortcut=" << to_string(l.shortcut);
    } else if (l.kind == "maxpool") {
      os << " k=" << l.k << " s=" << l.stride << " p=" << l.padding();
    } else if (l.kind == "fc" && l.out > 0) {
      os << " out=" << l.out;
    }
    os << "\n";
  }
  return os.str();
}

// Built-in architectures.
//
// resnet20_bireal_cifar: CIFAR ResNet-20 with a shortcut around every conv
// and PReLU-family activation after each addition; channels 16/32/64.
// resnet18_reactnet: ImageNet ResNet-18 in the same per-conv-shortcut style.
// reactnet_a: MobileNetV1-shaped all-binary network (cost model only).
// toy_cnn: small smoke-test net for 3x8x8 inputs.
inline ArchSpec builtin_archspec(const std::string& name, int num_classes = -1) {
  ArchSpec s;
  s.name = name;
  auto bin = [](int out, int stride, int k = 3,
                ShortcutKind sc = ShortcutKind::kAuto) {
    ArchLayer l;
    l.kind = "binunit";
    l.out = out;
    l.k = k;
    l.stride = stride;
    l.shortcut = sc;
    return l;
  };
  auto conv = [](int out, int k, int stride) {
    ArchLayer l;
    l.kind = "conv_real";
    l.out = out;
    l.k = k;
    l.stride = stride;
    return l;
  };
  if (name == "resnet20_bireal_cifar") {
    s.in_channels = 3;
    s.in_h = s.in_w = 32;
    s.num_classes = num_classes > 0 ? num_classes : 10;
    s.layers.push_back(conv(16, 3, 1));
    for (int i = 0; i < 6; ++i) s.layers.push_back(bin(16, 1));
    s.layers.push_back(bin(32, 2));
    for (int i = 0; i < 5; ++i) s.layers.push_back(bin(32, 1));
    s.layers.push_back(bin(64, 2));
    for (int i = 0; i < 5; ++i) s.layers.push_back(bin(64, 1));
    s.layers.push_back({.kind = "gap"});
    s.layers.push_back({.kind = "fc"});
  } else if (name == "resnet18_reactnet") {
    s.in_channels = 3;
    s.in_h = s.in_w = 224;
    s.num_classes = num_classes > 0 ? num_classes : 1000;
    s.layers.push_back(conv(64, 7, 2));
    ArchLayer mp;
    mp.kind = "maxpool";
    mp.k = 3;
    mp.stride = 2;
    mp.pad = 1;
    s.layers.push_back(mp);
    for (int i = 0; i < 4; ++i) s.layers.push_back(bin(64, 1));
    for (int c : {128, 256, 512}) {
      s.layers.push_back(bin(c, 2));
      for (int i = 0; i < 3; ++i) s.layers.push_back(bin(c, 1));
    }
    s.layers.push_back({.kind = "gap"});
    s.layers.push_back({.kind = "fc"});
  } else if (name == "reactnet_a") {
    s.in_channels = 3;
    s.in_h = s.in_w = 224;
    s.num_classes = num_classes > 0 ? num_classes : 1000;
    s.trainable = false;
    s.layers.push_back(conv(32, 3, 2));
    // (in, out, stride) per MobileNetV1 stage; a stride-2 unit keeps channels
    // on the 3x3 conv, the following 1x1 doubles them by duplication.
    const int plan[][3] = {{32, 64, 1},   {64, 128, 2},  {128, 128, 1},
                           {128, 256, 2}, {256, 256, 1}, {256, 512, 2},
                           {512, 512, 1}, {512, 512, 1}, {512, 512, 1},
                           {512, 512, 1}, {512, 512, 1}, {512, 1024, 2},
                           {1024, 1024, 1}};
    for (const auto& p : plan) {
      const int cin = p[0], cout = p[1], stride = p[2];
      s.layers.push_back(bin(cin, stride, 3,
                             stride == 2 ? ShortcutKind::kPool
                                         : ShortcutKind::kIdentity));
      s.layers.push_back(bin(cout, 1, 1,
                             cout != cin ? ShortcutKind::kDup
                                         : ShortcutKind::kIdentity));
    }
    s.layers.push_back({.kind = "gap"});
    s.layers.push_back({.kind = "fc"});
  } else if (name == "toy_cnn") {
    s.in_channels = 3;
    s.in_h = s.in_w = 8;
    s.num_classes = num_classes > 0 ? num_classes : 2;
    s.layers.push_back(conv(8, 3, 1));
    s.layers.push_back(bin(16, 2));
    s.layers.push_back(bin(16, 1));
    s.layers.push_back({.kind = "gap"});
    s.layers.push_back({.kind = "fc"});
  } else {
    throw std::invalid_argument("unknown architecture: " + name);
  }
  s.validate();
  return s;
}

}  // namespace instabnn
