#pragma once

#include "quantlab/analysis.hpp"
#include "quantlab/bench.hpp"
#include "quantlab/codec.hpp"
#include "quantlab/error.hpp"
#include "quantlab/fsq.hpp"
#include "quantlab/io.hpp"
#include "quantlab/optim.hpp"
#include "quantlab/range_coder.hpp"
#include "quantlab/selfcheck.hpp"
#include "quantlab/tensor.hpp"
#include "quantlab/token_models.hpp"
#include "quantlab/vq.hpp"
