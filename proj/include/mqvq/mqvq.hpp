#pragma once

#include "mqvq/checkpoint.hpp"
#include "mqvq/config.hpp"
#include "mqvq/dataset.hpp"
#include "mqvq/image_io.hpp"
#include "mqvq/mqvae.hpp"
#include "mqvq/ops.hpp"
#include "mqvq/optim.hpp"
#include "mqvq/quantizer.hpp"
#include "mqvq/sampler.hpp"
#include "mqvq/stackformer.hpp"
#include "mqvq/tensor.hpp"
#include "mqvq/train.hpp"
