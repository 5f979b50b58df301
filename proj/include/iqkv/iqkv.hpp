#pragma once

#include "iqkv/attention.hpp"   // IWYU pragma: export
#include "iqkv/bench.hpp"       // IWYU pragma: export
#include "iqkv/bitpack.hpp"     // IWYU pragma: export
#include "iqkv/kernels.hpp"     // IWYU pragma: export
#include "iqkv/kv_cache.hpp"    // IWYU pragma: export
#include "iqkv/quant.hpp"       // IWYU pragma: export
#include "iqkv/synthetic.hpp"   // IWYU pragma: export
#include "iqkv/tensor.hpp"      // IWYU pragma: export
