#pragma once

#include "latentaug/classifiers.hpp"
#include "latentaug/cluster.hpp"
#include "latentaug/common.hpp"
#include "latentaug/contrastive.hpp"
#include "latentaug/dictionary.hpp"
#include "latentaug/experiment.hpp"
#include "latentaug/metatask.hpp"
#include "latentaug/metrics.hpp"
#include "latentaug/store.hpp"
