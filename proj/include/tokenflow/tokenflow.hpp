#pragma once

#include "tokenflow/error.hpp"
#include "tokenflow/tensor.hpp"
#include "tokenflow/autodiff.hpp"
#include "tokenflow/io.hpp"
#include "tokenflow/codebook.hpp"
#include "tokenflow/quantizer.hpp"
#include "tokenflow/metrics.hpp"
#include "tokenflow/tokenizer.hpp"
#include "tokenflow/synthetic.hpp"
#include "tokenflow/sampler.hpp"
#include "tokenflow/config.hpp"
#include "tokenflow/dataio.hpp"
#include "tokenflow/analysis.hpp"
